//! Neural estimation of `I(E; C | X^r)` through the Donsker-Varadhan dual
//! of the KL divergence.
//!
//! A critic `T(x, e, c)` is trained to maximize
//! `E_joint[T] - log E_marginal[exp T]`, where joint samples are the logged
//! rows and marginal samples keep `(x, e)` but take `c` from a random
//! nearest neighbour in `x` (a draw from `P(C | X)` that ignores `E`).
//! The gradient of the log term uses a moving average of `E[exp T]` in its
//! denominator, which removes most of the minibatch bias of the plain
//! estimator.

mod knn;
mod net;
mod plugin;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ensure_dims, standardize_features, Dataset, InteractionRecord};
use crate::error::{Error, Result};
use crate::perturbation::BinAssignment;
use crate::rng;

pub use knn::{knn_table, NeighborTable};
pub use net::Activation;
pub use plugin::{plugin_cmi_discrete, ContingencyTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatNetConfig {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decay of the moving average of `E[exp T]`.
    pub ema_decay: f64,
    /// Neighbourhood size for the conditional permutation.
    pub knn_k: usize,
    /// Share of source records held out from training; when positive the
    /// reported objective is evaluated on them only. Copies of one record
    /// fall on the same side.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for StatNetConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            activation: Activation::Relu,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            ema_decay: 0.99,
            knn_k: 5,
            holdout_fraction: 0.0,
            seed: 0,
        }
    }
}

impl StatNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("stat net: {m}")));
        if self.hidden_layers.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.knn_k == 0 {
            return bad("epochs, batch_size and knn_k must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(0.0..0.9).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 0.9)");
        }
        Ok(())
    }
}

/// Estimate of the conditional mutual information in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiEstimate {
    /// Final-epoch DV objective (best held-out epoch when a hold-out is
    /// configured), clamped below at 0.
    pub value: f64,
    /// `value` before clamping.
    pub unclamped: f64,
    /// DV objective of every epoch, unclamped (on held-out rows when a
    /// hold-out is configured).
    pub train_curve: Vec<f64>,
    pub n_joint: usize,
    pub n_marginal: usize,
}

impl CmiEstimate {
    pub fn unclamped(&self) -> f64 {
        self.unclamped
    }
}

/// Which variable plays the role of `E` in `I(E; C | X^r)`.
#[derive(Debug, Clone, Copy)]
pub enum Dependence<'a> {
    /// The binary exposure column.
    Exposure,
    /// Stratum of the bias attribute, one-hot encoded.
    Strata(&'a BinAssignment),
}

/// Dense ids for `(user, item)`: copies of one source record share an id.
pub(crate) fn source_keys(records: &[InteractionRecord]) -> Vec<u64> {
    let mut ids: HashMap<(&str, &str), u64> = HashMap::with_capacity(records.len());
    records
        .iter()
        .map(|r| {
            let next = ids.len() as u64;
            *ids.entry((r.user_id.as_str(), r.item_id.as_str()))
                .or_insert(next)
        })
        .collect()
}

fn flat_features(dataset: &Dataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(dataset.len() * dataset.feature_dim());
    for r in dataset.records() {
        out.extend_from_slice(&r.x_r);
    }
    out
}

/// Replaces every click by the click of a uniformly chosen row among the
/// `knn_k` nearest neighbours in `x_r` (the row itself and copies of the
/// same source record excluded).
pub fn conditional_permutation(dataset: &Dataset, knn_k: usize, seed: u64) -> Result<Dataset> {
    if dataset.len() <= knn_k {
        return Err(Error::TooFewRows {
            needed: knn_k + 1,
            got: dataset.len(),
        });
    }
    ensure_dims(dataset)?;
    let keys = source_keys(dataset.records());
    let table = knn_table(
        &flat_features(dataset),
        dataset.feature_dim(),
        &keys,
        knn_k,
        rng::derive_seed(seed, "cmi/knn"),
    );
    let clicks = dataset.clicks();
    let mut pick = rng::stream(seed, "cmi/permute");
    let records = dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let nb = table.neighbors(i);
            let click = if nb.is_empty() {
                r.click
            } else {
                clicks[nb[pick.random_range(0..nb.len())] as usize]
            };
            InteractionRecord { click, ..r.clone() }
        })
        .collect();
    dataset.rebuild(records)
}

/// DV estimate of `I(E; C | X^r)` with `E` the exposure column.
pub fn estimate_cmi_dv(dataset: &Dataset, cfg: &StatNetConfig) -> Result<CmiEstimate> {
    estimate_cmi_dv_with(dataset, Dependence::Exposure, cfg)
}

/// DV estimate of `I(A; C | X^r)` for the chosen dependence variable `A`.
pub fn estimate_cmi_dv_with(
    dataset: &Dataset,
    dependence: Dependence<'_>,
    cfg: &StatNetConfig,
) -> Result<CmiEstimate> {
    cfg.validate()?;
    let n = dataset.len();
    if n <= cfg.knn_k {
        return Err(Error::TooFewRows {
            needed: cfg.knn_k + 1,
            got: n,
        });
    }
    let (standardized, _) = standardize_features(dataset)?;
    let records = standardized.records();
    let dim = standardized.feature_dim();

    let clicks: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(row, r)| match r.click {
            0 | 1 => Ok(f64::from(r.click)),
            _ => Err(Error::NonBinaryVariables { row }),
        })
        .collect::<Result<_>>()?;
    let (dep, dep_dim) = dependence_columns(records, dependence)?;

    let keys = source_keys(records);
    let features = flat_features(&standardized);
    let table = knn_table(
        &features,
        dim,
        &keys,
        cfg.knn_k,
        rng::derive_seed(cfg.seed, "cmi/knn"),
    );

    let input_dim = dim + dep_dim + 1;
    let mut train_rng = rng::stream(cfg.seed, "cmi/train");
    let mut critic = net::Mlp::new(
        input_dim,
        &cfg.hidden_layers,
        cfg.activation,
        cfg.learning_rate as f32,
        &mut train_rng,
    );

    let mut ema: Option<f64> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut marginal_clicks = vec![0.0; n];
    let split_seed = rng::derive_seed(cfg.seed, "cmi/holdout");
    let threshold = (cfg.holdout_fraction * u64::MAX as f64) as u64;
    let (held, train): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| cfg.holdout_fraction > 0.0 && rng::mix64(keys[i] ^ split_seed) < threshold);
    if train.len() <= 1 || (cfg.holdout_fraction > 0.0 && held.is_empty()) {
        return Err(Error::TooFewRows {
            needed: cfg.knn_k + 2,
            got: n,
        });
    }
    let n_train = train.len();
    let mut joint_order = train.clone();
    let mut marginal_order = train;
    let row_input = |i: usize, c: f64, x: &mut Vec<f32>| {
        x.extend(features[i * dim..(i + 1) * dim].iter().map(|&v| v as f32));
        x.extend(dep[i * dep_dim..(i + 1) * dep_dim].iter().map(|&v| v as f32));
        x.push(c as f32);
    };

    for epoch in 0..cfg.epochs {
        for (i, slot) in marginal_clicks.iter_mut().enumerate() {
            let nb = table.neighbors(i);
            *slot = if nb.is_empty() {
                clicks[i]
            } else {
                clicks[nb[train_rng.random_range(0..nb.len())] as usize]
            };
        }
        joint_order.shuffle(&mut train_rng);
        marginal_order.shuffle(&mut train_rng);

        let mut sum_joint = 0.0;
        let mut lse = LogSumExp::default();
        for start in (0..n_train).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(n_train);
            let b = end - start;
            let joint = &joint_order[start..end];
            let marginal = &marginal_order[start..end];
            let mut x = Vec::with_capacity(2 * b * input_dim);
            for row in 0..2 * b {
                let (i, c) = if row < b {
                    (joint[row], clicks[joint[row]])
                } else {
                    let i = marginal[row - b];
                    (i, marginal_clicks[i])
                };
                row_input(i, c, &mut x);
            }
            let tape = critic.forward(x, 2 * b);
            let out: Vec<f64> = tape.out.iter().map(|&t| f64::from(t)).collect();
            let (t_joint, t_marg) = out.split_at(b);

            let max = t_marg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean_exp = max.exp() * t_marg.iter().map(|t| (t - max).exp()).sum::<f64>() / b as f64;
            let avg = match ema {
                None => mean_exp,
                Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * mean_exp,
            };
            ema = Some(avg);

            sum_joint += t_joint.iter().sum::<f64>();
            for &t in t_marg.iter() {
                lse.push(t);
            }

            // Gradient of the negated objective.
            let inv_b = 1.0 / b as f64;
            let grad: Vec<f32> = (0..2 * b)
                .map(|row| {
                    let g = if row < b {
                        -inv_b
                    } else {
                        out[row].exp() * inv_b / avg
                    };
                    g as f32
                })
                .collect();
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::DivergedTraining { epoch });
            }
            critic.backward_step(tape, &grad);
        }
        let value = if held.is_empty() {
            sum_joint / n_train as f64 - (lse.value() - (n_train as f64).ln())
        } else {
            held_out_objective(&critic, &held, &clicks, &marginal_clicks, input_dim, row_input)
        };
        if !value.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        curve.push(value);
    }

    // With a hold-out the curve is a validation curve; report its best
    // epoch (early stopping) instead of the possibly overfitted last one.
    let last = if held.is_empty() {
        *curve.last().expect("epochs > 0")
    } else {
        curve.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    let n_eval = if held.is_empty() { n_train } else { held.len() };
    Ok(CmiEstimate {
        value: last.max(0.0),
        unclamped: last,
        train_curve: curve,
        n_joint: n_eval,
        n_marginal: n_eval,
    })
}

/// Plain DV objective of a fixed critic over `rows`.
fn held_out_objective(
    critic: &net::Mlp,
    rows: &[usize],
    clicks: &[f64],
    marginal_clicks: &[f64],
    input_dim: usize,
    row_input: impl Fn(usize, f64, &mut Vec<f32>),
) -> f64 {
    const CHUNK: usize = 1024;
    let mut sum_joint = 0.0;
    let mut lse = LogSumExp::default();
    for chunk in rows.chunks(CHUNK) {
        let b = chunk.len();
        let mut x = Vec::with_capacity(2 * b * input_dim);
        for &i in chunk {
            row_input(i, clicks[i], &mut x);
        }
        for &i in chunk {
            row_input(i, marginal_clicks[i], &mut x);
        }
        let out = critic.forward(x, 2 * b).out;
        sum_joint += out[..b].iter().map(|&t| f64::from(t)).sum::<f64>();
        for &t in &out[b..] {
            lse.push(f64::from(t));
        }
    }
    let m = rows.len() as f64;
    sum_joint / m - (lse.value() - m.ln())
}

fn dependence_columns(
    records: &[InteractionRecord],
    dependence: Dependence<'_>,
) -> Result<(Vec<f64>, usize)> {
    match dependence {
        Dependence::Exposure => {
            let col = records
                .iter()
                .enumerate()
                .map(|(row, r)| match r.exposure {
                    0 | 1 => Ok(f64::from(r.exposure)),
                    _ => Err(Error::NonBinaryVariables { row }),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((col, 1))
        }
        Dependence::Strata(bins) => {
            if bins.bins.len() != records.len() {
                return Err(Error::LengthMismatch(bins.bins.len(), records.len()));
            }
            let k = bins.k;
            let mut out = vec![0.0; records.len() * k];
            for (i, &b) in bins.bins.iter().enumerate() {
                out[i * k + b] = 1.0;
            }
            Ok((out, k))
        }
    }
}

/// Streaming log-sum-exp.
#[derive(Debug, Default)]
struct LogSumExp {
    max: Option<f64>,
    sum: f64,
}

impl LogSumExp {
    fn push(&mut self, v: f64) {
        match self.max {
            None => {
                self.max = Some(v);
                self.sum = 1.0;
            }
            Some(m) if v <= m => self.sum += (v - m).exp(),
            Some(m) => {
                self.sum = self.sum * (m - v).exp() + 1.0;
                self.max = Some(v);
            }
        }
    }

    fn value(&self) -> f64 {
        self.max.map_or(f64::NEG_INFINITY, |m| m + self.sum.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BiasKind, BiasValue, Split};

    fn grid_dataset() -> Dataset {
        // x in {-3,-2,-1,1,2,3}; click = 1 when x > 0.
        let recs = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                InteractionRecord::new(
                    format!("u{i}"),
                    "i",
                    vec![x],
                    BiasValue::Real(0.0),
                    1,
                    u8::from(x > 0.0),
                )
            })
            .collect();
        Dataset::new(recs, Split::Eval, BiasKind::Continuous).unwrap()
    }

    #[test]
    fn one_nn_permutation_on_grid_keeps_sign_clicks() {
        let d = grid_dataset();
        let p = conditional_permutation(&d, 1, 9).unwrap();
        assert_eq!(p.clicks(), vec![0, 0, 0, 1, 1, 1]);
        // Features and exposure are untouched.
        for (a, b) in d.records().iter().zip(p.records()) {
            assert_eq!(a.x_r, b.x_r);
            assert_eq!(a.exposure, b.exposure);
        }
    }

    #[test]
    fn too_few_rows() {
        let d = grid_dataset().select(&[0, 1, 2]).unwrap();
        assert!(matches!(
            conditional_permutation(&d, 5, 0),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn click_determined_by_features_survives_permutation() {
        // Dense 1-D grid, click = 1[x > 0]: neighbours share the click
        // except right at the boundary.
        let recs = (0..400)
            .map(|i| {
                let x = i as f64 / 400.0 - 0.5;
                InteractionRecord::new(
                    format!("u{i}"),
                    "i",
                    vec![x],
                    BiasValue::Real(0.0),
                    1,
                    u8::from(x > 0.0),
                )
            })
            .collect();
        let d = Dataset::new(recs, Split::Eval, BiasKind::Continuous).unwrap();
        let p = conditional_permutation(&d, 5, 1).unwrap();
        let changed = d
            .clicks()
            .iter()
            .zip(p.clicks())
            .filter(|(a, b)| **a != *b)
            .count();
        assert!(changed <= 6, "{changed} clicks changed");
    }

    #[test]
    fn non_binary_click_is_rejected() {
        let mut recs = grid_dataset().into_records();
        recs[0].click = 2;
        let d = Dataset::new(recs, Split::Eval, BiasKind::Continuous).unwrap();
        let cfg = StatNetConfig {
            knn_k: 1,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            estimate_cmi_dv(&d, &cfg),
            Err(Error::NonBinaryVariables { row: 0 })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = StatNetConfig {
            ema_decay: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(StatNetConfig::default().validate().is_ok());
    }

    #[test]
    fn log_sum_exp_streaming() {
        let mut l = LogSumExp::default();
        for v in [0.5, -2.0, 3.0, 1.0] {
            l.push(v);
        }
        let direct = [0.5f64, -2.0, 3.0, 1.0].iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((l.value() - direct).abs() < 1e-12);
    }
}
