//! Click prediction `f(x) -> P(C = 1 | x)` trained with binary cross-entropy.
//!
//! Two model families share one surface: L2-regularized logistic regression
//! fitted by full-batch gradient descent, and boosted depth-1 trees
//! (stumps) fitted by Newton boosting. Inputs are standardized internally;
//! the transform travels with the fitted model.

use serde::{Deserialize, Serialize};

use crate::data::{BiasKind, BiasValue, Dataset, FeatureTransform, InteractionRecord};
use crate::error::{Error, Result};

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]`.
pub const CLAMP: f64 = 1e-12;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    BoostedStumps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickModelConfig {
    pub model_kind: ModelKind,
    pub l2: f64,
    /// Step size for logistic regression, shrinkage for stumps.
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_stumps: usize,
    /// Append the bias attribute to the model input.
    pub include_bias_factor: bool,
    pub seed: u64,
}

impl Default for ClickModelConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Logistic,
            l2: 1e-4,
            learning_rate: 0.1,
            epochs: 100,
            n_stumps: 200,
            include_bias_factor: false,
            seed: 0,
        }
    }
}

impl ClickModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.n_stumps == 0 {
            return Err(Error::InvalidConfig("epochs and n_stumps must be positive".into()));
        }
        Ok(())
    }
}

/// How the bias attribute is appended to the input, if at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasEncoding {
    None,
    Scalar,
    OneHot(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub x_r_dim: usize,
    pub bias: BiasEncoding,
}

impl FeatureSchema {
    pub fn input_dim(&self) -> usize {
        self.x_r_dim
            + match &self.bias {
                BiasEncoding::None => 0,
                BiasEncoding::Scalar => 1,
                BiasEncoding::OneHot(labels) => labels.len(),
            }
    }

    pub fn includes_bias_factor(&self) -> bool {
        !matches!(self.bias, BiasEncoding::None)
    }

    /// Model input for a record.
    pub fn encode(&self, record: &InteractionRecord) -> Result<Vec<f64>> {
        if record.x_r.len() != self.x_r_dim {
            return Err(Error::SchemaMismatch {
                expected: self.x_r_dim,
                got: record.x_r.len(),
            });
        }
        let mut x = record.x_r.clone();
        match (&self.bias, &record.x_nr) {
            (BiasEncoding::None, _) => {}
            (BiasEncoding::Scalar, BiasValue::Real(v)) => x.push(*v),
            (BiasEncoding::OneHot(labels), BiasValue::Label(l)) => {
                x.extend(labels.iter().map(|k| if k == l { 1.0 } else { 0.0 }))
            }
            _ => {
                return Err(Error::InvalidDataset(
                    "bias attribute kind does not match the model schema".into(),
                ))
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    /// Output for `x[feature] <= threshold`.
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Logistic { weights: Vec<f64>, bias: f64 },
    /// `logit = base + sum of stump outputs` (shrinkage already applied).
    BoostedStumps { base: f64, stumps: Vec<Stump> },
}

/// A trained click model. Immutable and safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedClickModel {
    pub format_version: u32,
    pub schema: FeatureSchema,
    pub transform: FeatureTransform,
    pub params: ModelParams,
    pub train_loss_curve: Vec<f64>,
    /// Every training label was identical; the model is constant.
    pub single_class: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

fn bce(p: f64, c: f64) -> f64 {
    -(c * p.ln() + (1.0 - c) * (1.0 - p).ln())
}

impl FittedClickModel {
    /// Logistic model over raw inputs (identity transform, no bias factor).
    pub fn logistic(weights: Vec<f64>, bias: f64) -> Self {
        let dim = weights.len();
        Self {
            format_version: MODEL_FORMAT_VERSION,
            schema: FeatureSchema {
                x_r_dim: dim,
                bias: BiasEncoding::None,
            },
            transform: FeatureTransform::identity(dim),
            params: ModelParams::Logistic { weights, bias },
            train_loss_curve: Vec::new(),
            single_class: false,
        }
    }

    fn logit_standardized(&self, z: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Logistic { weights, bias } => {
                bias + weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>()
            }
            ModelParams::BoostedStumps { base, stumps } => {
                base + stumps
                    .iter()
                    .map(|s| if z[s.feature] <= s.threshold { s.left } else { s.right })
                    .sum::<f64>()
            }
        }
    }

    /// Click probability for a full model input (`x_r` followed by the bias
    /// encoding when the schema includes it).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let dim = self.schema.input_dim();
        if x.len() != dim {
            return Err(Error::SchemaMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        let z = self.transform.apply_row(x);
        Ok(clamp_prob(sigmoid(self.logit_standardized(&z))))
    }

    pub fn predict_record(&self, record: &InteractionRecord) -> Result<f64> {
        self.predict(&self.schema.encode(record)?)
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        dataset
            .records()
            .iter()
            .map(|r| self.predict_record(r))
            .collect()
    }

    /// Flat parameter vector: logistic `[w.., b]`; stumps
    /// `[base, left_0, right_0, left_1, ..]`.
    pub fn parameters(&self) -> Vec<f64> {
        match &self.params {
            ModelParams::Logistic { weights, bias } => {
                let mut p = weights.clone();
                p.push(*bias);
                p
            }
            ModelParams::BoostedStumps { base, stumps } => {
                let mut p = vec![*base];
                for s in stumps {
                    p.push(s.left);
                    p.push(s.right);
                }
                p
            }
        }
    }

    pub fn with_parameters(&self, p: &[f64]) -> Result<Self> {
        let expected = self.parameters().len();
        if p.len() != expected {
            return Err(Error::LengthMismatch(expected, p.len()));
        }
        let params = match &self.params {
            ModelParams::Logistic { weights, .. } => ModelParams::Logistic {
                weights: p[..weights.len()].to_vec(),
                bias: p[weights.len()],
            },
            ModelParams::BoostedStumps { stumps, .. } => ModelParams::BoostedStumps {
                base: p[0],
                stumps: stumps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Stump {
                        left: p[1 + 2 * i],
                        right: p[2 + 2 * i],
                        ..s.clone()
                    })
                    .collect(),
            },
        };
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    /// Weighted mean BCE (unclamped sigmoid) plus `l2/2` times the squared
    /// norm of the penalized parameters, and its gradient with respect to
    /// [`parameters`](Self::parameters).
    pub fn objective_and_gradient(
        &self,
        dataset: &Dataset,
        row_weights: Option<&[f64]>,
        l2: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let inputs = self.standardized_inputs(dataset)?;
        let clicks: Vec<f64> = dataset.records().iter().map(|r| f64::from(r.click)).collect();
        let weights = normalized_weights(row_weights, dataset.len())?;
        let mut grad = vec![0.0; self.parameters().len()];
        let mut loss = 0.0;
        for ((z, c), w) in inputs.iter().zip(&clicks).zip(&weights) {
            let p = sigmoid(self.logit_standardized(z));
            loss += w * bce(p, *c);
            let r = w * (p - c);
            match &self.params {
                ModelParams::Logistic { weights: beta, .. } => {
                    for (g, x) in grad.iter_mut().zip(z) {
                        *g += r * x;
                    }
                    grad[beta.len()] += r;
                }
                ModelParams::BoostedStumps { stumps, .. } => {
                    grad[0] += r;
                    for (i, s) in stumps.iter().enumerate() {
                        let slot = if z[s.feature] <= s.threshold { 1 + 2 * i } else { 2 + 2 * i };
                        grad[slot] += r;
                    }
                }
            }
        }
        let params = self.parameters();
        let penalized: Vec<usize> = match &self.params {
            ModelParams::Logistic { weights, .. } => (0..weights.len()).collect(),
            ModelParams::BoostedStumps { .. } => (1..params.len()).collect(),
        };
        for i in penalized {
            loss += 0.5 * l2 * params[i] * params[i];
            grad[i] += l2 * params[i];
        }
        Ok((loss, grad))
    }

    fn standardized_inputs(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        dataset
            .records()
            .iter()
            .map(|r| Ok(self.transform.apply_row(&self.schema.encode(r)?)))
            .collect()
    }
}

/// Mean BCE of clamped predictions.
pub fn bce_loss(model: &FittedClickModel, dataset: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for r in dataset.records() {
        let p = model.predict_record(r)?;
        total += bce(p, f64::from(r.click));
    }
    Ok(total / dataset.len() as f64)
}

/// Row weights rescaled to mean 1.
fn normalized_weights(row_weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match row_weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::LengthMismatch(n, w.len()));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidWeights("row weights must be finite and non-negative".into()));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidWeights("row weights sum to zero".into()));
            }
            Ok(w.iter().map(|v| v / total).collect())
        }
    }
}

/// Fits a click model with uniform row weights.
pub fn fit(dataset: &Dataset, cfg: &ClickModelConfig) -> Result<FittedClickModel> {
    fit_weighted(dataset, cfg, None)
}

/// Fits a click model; `row_weights` multiply the per-row BCE terms (used
/// for inverse-propensity weighted training).
pub fn fit_weighted(
    dataset: &Dataset,
    cfg: &ClickModelConfig,
    row_weights: Option<&[f64]>,
) -> Result<FittedClickModel> {
    cfg.validate()?;
    crate::data::ensure_dims(dataset)?;
    let schema = FeatureSchema {
        x_r_dim: dataset.feature_dim(),
        bias: if !cfg.include_bias_factor {
            BiasEncoding::None
        } else {
            match dataset.x_nr_kind() {
                BiasKind::Continuous => BiasEncoding::Scalar,
                BiasKind::Categorical => BiasEncoding::OneHot(dataset.x_nr_labels()),
            }
        },
    };
    let raw: Vec<Vec<f64>> = dataset
        .records()
        .iter()
        .map(|r| schema.encode(r))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = raw.iter().map(Vec::as_slice).collect();
    let transform = FeatureTransform::fit(&refs);
    let inputs: Vec<Vec<f64>> = raw.iter().map(|x| transform.apply_row(x)).collect();
    let clicks: Vec<f64> = dataset.records().iter().map(|r| f64::from(r.click)).collect();
    let weights = normalized_weights(row_weights, dataset.len())?;

    let mean_click: f64 = clicks.iter().zip(&weights).map(|(c, w)| c * w).sum();
    let dim = schema.input_dim();
    let mut model = FittedClickModel {
        format_version: MODEL_FORMAT_VERSION,
        schema,
        transform,
        params: ModelParams::Logistic {
            weights: vec![0.0; dim],
            bias: 0.0,
        },
        train_loss_curve: Vec::new(),
        single_class: false,
    };

    let first = clicks[0];
    if clicks.iter().all(|&c| c == first) {
        log::warn!("all training clicks equal {first}; fitting a constant predictor");
        let p = first.clamp(1e-6, 1.0 - 1e-6);
        let logit = (p / (1.0 - p)).ln();
        model.params = match cfg.model_kind {
            ModelKind::Logistic => ModelParams::Logistic {
                weights: vec![0.0; dim],
                bias: logit,
            },
            ModelKind::BoostedStumps => ModelParams::BoostedStumps {
                base: logit,
                stumps: Vec::new(),
            },
        };
        model.single_class = true;
        return Ok(model);
    }

    match cfg.model_kind {
        ModelKind::Logistic => fit_logistic(&mut model, &inputs, &clicks, &weights, cfg),
        ModelKind::BoostedStumps => {
            fit_stumps(&mut model, &inputs, &clicks, &weights, mean_click, cfg)
        }
    }
    Ok(model)
}

fn weighted_bce_and_grad(
    inputs: &[Vec<f64>],
    clicks: &[f64],
    weights: &[f64],
    beta: &[f64],
    bias: f64,
    l2: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; beta.len() + 1];
    let mut loss = 0.0;
    for ((z, c), w) in inputs.iter().zip(clicks).zip(weights) {
        let logit = bias + beta.iter().zip(z).map(|(b, x)| b * x).sum::<f64>();
        let p = sigmoid(logit);
        loss += w * bce(clamp_prob(p), *c);
        let r = w * (p - c);
        for (g, x) in grad.iter_mut().zip(z) {
            *g += r * x;
        }
        grad[beta.len()] += r;
    }
    for (g, b) in grad.iter_mut().zip(beta) {
        loss += 0.5 * l2 * b * b;
        *g += l2 * b;
    }
    (loss, grad)
}

/// Full-batch gradient descent with step halving whenever a step would
/// increase the objective, so the loss curve never goes up.
fn fit_logistic(
    model: &mut FittedClickModel,
    inputs: &[Vec<f64>],
    clicks: &[f64],
    weights: &[f64],
    cfg: &ClickModelConfig,
) {
    let dim = model.schema.input_dim();
    let mut beta = vec![0.0; dim];
    let mut bias = 0.0;
    let mut lr = cfg.learning_rate;
    let (mut loss, mut grad) = weighted_bce_and_grad(inputs, clicks, weights, &beta, bias, cfg.l2);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut accepted = false;
        for _ in 0..40 {
            let cand_beta: Vec<f64> = beta.iter().zip(&grad).map(|(b, g)| b - lr * g).collect();
            let cand_bias = bias - lr * grad[dim];
            let (cand_loss, cand_grad) =
                weighted_bce_and_grad(inputs, clicks, weights, &cand_beta, cand_bias, cfg.l2);
            if cand_loss <= loss {
                beta = cand_beta;
                bias = cand_bias;
                loss = cand_loss;
                grad = cand_grad;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        curve.push(loss);
        if !accepted {
            // Converged to rounding precision.
            break;
        }
    }
    model.params = ModelParams::Logistic {
        weights: beta,
        bias,
    };
    model.train_loss_curve = curve;
}

fn fit_stumps(
    model: &mut FittedClickModel,
    inputs: &[Vec<f64>],
    clicks: &[f64],
    weights: &[f64],
    mean_click: f64,
    cfg: &ClickModelConfig,
) {
    let n = inputs.len();
    let dim = model.schema.input_dim();
    let p0 = mean_click.clamp(1e-6, 1.0 - 1e-6);
    let base = (p0 / (1.0 - p0)).ln();
    let mut logits = vec![base; n];
    // Rows sorted by each feature, plus the distinct-value boundaries.
    let orders: Vec<Vec<usize>> = (0..dim)
        .map(|j| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| inputs[a][j].total_cmp(&inputs[b][j]).then(a.cmp(&b)));
            o
        })
        .collect();
    let lambda = cfg.l2.max(1e-6);
    let mut stumps = Vec::with_capacity(cfg.n_stumps);
    let mut curve = Vec::with_capacity(cfg.n_stumps);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..cfg.n_stumps {
        let mut g_total = 0.0;
        let mut h_total = 0.0;
        for i in 0..n {
            let p = sigmoid(logits[i]);
            g[i] = weights[i] * (p - clicks[i]);
            h[i] = weights[i] * p * (1.0 - p);
            g_total += g[i];
            h_total += h[i];
        }
        let parent = g_total * g_total / (h_total + lambda);
        let mut best: Option<(f64, usize, f64, f64, f64)> = None;
        for (j, order) in orders.iter().enumerate() {
            let mut gl = 0.0;
            let mut hl = 0.0;
            for w in 0..n - 1 {
                let i = order[w];
                gl += g[i];
                hl += h[i];
                let here = inputs[i][j];
                let next = inputs[order[w + 1]][j];
                if here == next {
                    continue;
                }
                let gr = g_total - gl;
                let hr = h_total - hl;
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, j, 0.5 * (here + next), gl / (hl + lambda), gr / (hr + lambda)));
                }
            }
        }
        let Some((gain, feature, threshold, left_ratio, right_ratio)) = best else {
            break;
        };
        if gain <= 1e-15 {
            break;
        }
        let stump = Stump {
            feature,
            threshold,
            left: -cfg.learning_rate * left_ratio,
            right: -cfg.learning_rate * right_ratio,
        };
        let mut loss = 0.0;
        for i in 0..n {
            logits[i] += if inputs[i][feature] <= threshold {
                stump.left
            } else {
                stump.right
            };
            loss += weights[i] * bce(clamp_prob(sigmoid(logits[i])), clicks[i]);
        }
        stumps.push(stump);
        curve.push(loss);
    }
    model.params = ModelParams::BoostedStumps { base, stumps };
    model.train_loss_curve = curve;
}
