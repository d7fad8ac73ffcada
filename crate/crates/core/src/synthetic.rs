//! Synthetic MNAR data with a known generative law.
//!
//! For every user-item pair: `x_r ~ N(0, I_d)`, `x_nr` drawn from the
//! configured distribution, relevance `s = a * (u . x_r) / sqrt(d)` for the
//! fixed unit vector `u = 1 / sqrt(d)`, exposure
//! `E ~ Bernoulli(sigmoid(s + b (x_nr - mean) + beta0))` and click
//! `C = E * Bernoulli(sigmoid(c s))`. The logged (MNAR) data keeps exposed
//! pairs plus a 10% sample of unexposed ones; the MAR oracle exposes every
//! pair and redraws its click.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{BiasKind, BiasValue, Dataset, InteractionRecord, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Share of unexposed pairs kept in the logged data.
pub const UNEXPOSED_KEEP: f64 = 0.1;

const CALIBRATION_TOLERANCE: f64 = 0.005;
const CALIBRATION_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XnrDist {
    Uniform01,
    Exponential,
}

impl XnrDist {
    fn mean(self) -> f64 {
        match self {
            XnrDist::Uniform01 => 0.5,
            XnrDist::Exponential => 1.0,
        }
    }

    fn quantile(self, p: f64) -> f64 {
        match self {
            XnrDist::Uniform01 => p,
            XnrDist::Exponential => -(1.0 - p).ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub feature_dim: usize,
    pub bias_strength: f64,
    pub relevance_strength: f64,
    pub click_strength: f64,
    pub exposure_budget: f64,
    pub x_nr_dist: XnrDist,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 250,
            feature_dim: 8,
            bias_strength: 4.0,
            relevance_strength: 2.0,
            click_strength: 2.0,
            exposure_budget: 0.3,
            x_nr_dist: XnrDist::Uniform01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("synthetic: {m}")));
        if self.n_users == 0 || self.n_items == 0 || self.feature_dim == 0 {
            return fail("n_users, n_items and feature_dim must be positive");
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return fail("bias_strength must be non-negative");
        }
        if !(self.relevance_strength > 0.0) || !(self.click_strength > 0.0) {
            return fail("relevance and click strengths must be positive");
        }
        if !(self.exposure_budget > 0.0 && self.exposure_budget <= 1.0) {
            return fail("exposure_budget must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.n_users * self.n_items
    }

    fn relevance_scale(&self) -> f64 {
        self.relevance_strength / (self.feature_dim as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub mnar: Dataset,
    pub mar_oracle: Dataset,
    /// Calibrated exposure intercept.
    pub intercept: f64,
    /// Realized exposure rate over all pairs.
    pub exposure_rate: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bisection for an increasing function `f(beta)` to hit `target`.
fn bisect(mut f: impl FnMut(f64) -> f64, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (flo, fhi) = (f(lo), f(hi));
    let (beta, reached) = if (flo - target).abs() <= (fhi - target).abs() {
        (lo, flo)
    } else {
        (hi, fhi)
    };
    if (reached - target).abs() > CALIBRATION_TOLERANCE {
        return Err(Error::CalibrationFailed { target, reached });
    }
    Ok(beta)
}

/// Draws the logged MNAR dataset and its MAR oracle. The exposure
/// intercept is calibrated on the drawn pairs so that the realized
/// exposure rate matches the budget.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let n = cfg.n_pairs();
    let d = cfg.feature_dim;
    let mut feat_rng = rng::stream(cfg.seed, "synthetic/x_r");
    let mut xnr_rng = rng::stream(cfg.seed, "synthetic/x_nr");
    let mut exp_rng = rng::stream(cfg.seed, "synthetic/exposure");
    let mut click_rng = rng::stream(cfg.seed, "synthetic/click");
    let mut mar_rng = rng::stream(cfg.seed, "synthetic/mar_click");
    let mut keep_rng = rng::stream(cfg.seed, "synthetic/keep_unexposed");

    let mut xs = Vec::with_capacity(n * d);
    let mut x_nr = Vec::with_capacity(n);
    let mut score = Vec::with_capacity(n);
    let mean_nr = cfg.x_nr_dist.mean();
    for _ in 0..n {
        let start = xs.len();
        xs.extend((0..d).map(|_| -> f64 { StandardNormal.sample(&mut feat_rng) }));
        let proj: f64 = xs[start..].iter().sum::<f64>() / (d as f64).sqrt();
        score.push(cfg.relevance_scale() * proj);
        x_nr.push(match cfg.x_nr_dist {
            XnrDist::Uniform01 => xnr_rng.random::<f64>(),
            XnrDist::Exponential => Exp1.sample(&mut xnr_rng),
        });
    }
    let eta: Vec<f64> = score
        .iter()
        .zip(&x_nr)
        .map(|(s, x)| s + cfg.bias_strength * (x - mean_nr))
        .collect();
    let u_exp: Vec<f64> = (0..n).map(|_| exp_rng.random::<f64>()).collect();
    let exposure_rate = |beta: f64| {
        eta.iter()
            .zip(&u_exp)
            .filter(|(e, u)| **u < sigmoid(**e + beta))
            .count() as f64
            / n as f64
    };
    let intercept = bisect(exposure_rate, cfg.exposure_budget)?;
    let realized = exposure_rate(intercept);

    let mut mnar = Vec::new();
    let mut mar = Vec::with_capacity(n);
    for p in 0..n {
        let user = format!("u{}", p / cfg.n_items);
        let item = format!("i{}", p % cfg.n_items);
        let x = xs[p * d..(p + 1) * d].to_vec();
        let v = sigmoid(cfg.click_strength * score[p]);
        let exposed = u_exp[p] < sigmoid(eta[p] + intercept);
        let clicked = click_rng.random::<f64>() < v;
        let keep = keep_rng.random::<f64>() < UNEXPOSED_KEEP;
        let mar_click = mar_rng.random::<f64>() < v;
        if exposed || keep {
            mnar.push(InteractionRecord::new(
                user.clone(),
                item.clone(),
                x.clone(),
                BiasValue::Real(x_nr[p]),
                u8::from(exposed),
                u8::from(exposed && clicked),
            ));
        }
        mar.push(InteractionRecord::new(
            user,
            item,
            x,
            BiasValue::Real(x_nr[p]),
            1,
            u8::from(mar_click),
        ));
    }
    let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    Ok(SyntheticData {
        mnar: Dataset::new(mnar, Split::Train, BiasKind::Continuous)?
            .with_feature_names(names.clone())?,
        mar_oracle: Dataset::new(mar, Split::Benchmark, BiasKind::Continuous)?
            .with_feature_names(names)?,
        intercept,
        exposure_rate: realized,
    })
}

/// Which variable's dependence on clicks the oracle measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmiTarget {
    /// `I(E; C | X^r)` on the logged distribution.
    Exposure,
    /// `I(X^nr; C | X^r)` on the logged distribution.
    BiasAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueCmi {
    pub value: f64,
    pub standard_error: f64,
    pub n_mc: usize,
    pub target: CmiTarget,
    /// Population-calibrated exposure intercept used by the oracle.
    pub intercept: f64,
}

/// Quadrature nodes for `x_nr` (midpoints in probability space).
const XNR_NODES: usize = 256;

fn xnr_nodes(dist: XnrDist) -> Vec<f64> {
    (0..XNR_NODES)
        .map(|j| dist.quantile((j as f64 + 0.5) / XNR_NODES as f64))
        .collect()
}

/// Exposure intercept that meets the budget in expectation over the
/// generative law.
pub fn population_intercept(cfg: &SyntheticConfig) -> Result<f64> {
    cfg.validate()?;
    let normal = Normal::standard();
    let t_nodes: Vec<f64> = (0..400)
        .map(|i| normal.inverse_cdf((i as f64 + 0.5) / 400.0))
        .collect();
    let nodes = xnr_nodes(cfg.x_nr_dist);
    let mean_nr = cfg.x_nr_dist.mean();
    let scale = cfg.relevance_scale();
    bisect(
        |beta| {
            let mut total = 0.0;
            for t in &t_nodes {
                for x in &nodes {
                    total += sigmoid(scale * t + cfg.bias_strength * (x - mean_nr) + beta);
                }
            }
            total / (t_nodes.len() * nodes.len()) as f64
        },
        cfg.exposure_budget,
    )
}

/// Binary entropy in nats.
fn entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Monte-Carlo value of the conditional mutual information under the
/// generative law, with its standard error.
///
/// Relevance depends on `x_r` only through `t = u . x_r ~ N(0, 1)`, so the
/// outer expectation samples `t`; the inner expectation over `x_nr` uses
/// quadrature. Draws are weighted by the probability that a pair with that
/// `t` appears in the logged data.
pub fn true_cmi(cfg: &SyntheticConfig, n_mc: usize, target: CmiTarget) -> Result<TrueCmi> {
    if n_mc < 2 {
        return Err(Error::InvalidConfig("n_mc must be at least 2".into()));
    }
    let intercept = population_intercept(cfg)?;
    let nodes = xnr_nodes(cfg.x_nr_dist);
    let mean_nr = cfg.x_nr_dist.mean();
    let scale = cfg.relevance_scale();
    let mut rng = rng::stream(cfg.seed, &format!("synthetic/true_cmi/{n_mc}"));
    let mut g = vec![0.0; nodes.len()];
    let mut ys = Vec::with_capacity(n_mc);
    let mut ks = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let t: f64 = StandardNormal.sample(&mut rng);
        let s = scale * t;
        let v = sigmoid(cfg.click_strength * s);
        for (gj, x) in g.iter_mut().zip(&nodes) {
            *gj = sigmoid(s + cfg.bias_strength * (x - mean_nr) + intercept);
        }
        let q = g.iter().sum::<f64>() / g.len() as f64;
        let kappa = q + UNEXPOSED_KEEP * (1.0 - q);
        let info = match target {
            CmiTarget::Exposure => {
                let pi = q / kappa;
                entropy(pi * v) - pi * entropy(v)
            }
            CmiTarget::BiasAttribute => {
                let k_sum: f64 = g.iter().map(|gj| gj + UNEXPOSED_KEEP * (1.0 - gj)).sum();
                let p_click = v * g.iter().sum::<f64>() / k_sum;
                let inner: f64 = g
                    .iter()
                    .map(|gj| {
                        let k = gj + UNEXPOSED_KEEP * (1.0 - gj);
                        k / k_sum * entropy(gj * v / k)
                    })
                    .sum();
                entropy(p_click) - inner
            }
        };
        ys.push(kappa * info);
        ks.push(kappa);
    }
    let n = n_mc as f64;
    let y_bar = ys.iter().sum::<f64>() / n;
    let k_bar = ks.iter().sum::<f64>() / n;
    let ratio = y_bar / k_bar;
    // Delta-method variance of a ratio estimator.
    let resid_var = ys
        .iter()
        .zip(&ks)
        .map(|(y, k)| (y - ratio * k).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok(TrueCmi {
        value: ratio,
        standard_error: (resid_var / n).sqrt() / k_bar,
        n_mc,
        target,
        intercept,
    })
}
