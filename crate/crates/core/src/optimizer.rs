//! Bayesian optimization over stratum weights with a Gaussian-process
//! surrogate and expected improvement.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::perturbation::WeightVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Matern52,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub n_iter: usize,
    /// Latin-hypercube points before the sequential phase; `2K + 1` if unset.
    pub n_init: Option<usize>,
    /// Default box for every dimension.
    pub lower: f64,
    pub upper: f64,
    /// Per-dimension `[lo, hi]`, overriding `lower`/`upper` when set.
    pub bounds: Option<Vec<[f64; 2]>>,
    pub kernel: Kernel,
    pub length_scale: f64,
    pub noise_variance: f64,
    pub xi: f64,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n_iter: 50,
            n_init: None,
            lower: 0.05,
            upper: 1.0,
            bounds: None,
            kernel: Kernel::Matern52,
            length_scale: 0.2,
            noise_variance: 1e-4,
            xi: 0.01,
            n_candidates: 2048,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn bounds_for(&self, k: usize) -> Vec<[f64; 2]> {
        match &self.bounds {
            Some(b) => b.clone(),
            None => vec![[self.lower, self.upper]; k],
        }
    }

    pub fn n_init_for(&self, k: usize) -> usize {
        self.n_init.unwrap_or(2 * k + 1)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.n_iter == 0 || self.n_init_for(k) == 0 {
            return Err(Error::InvalidConfig("n_iter and n_init must be positive".into()));
        }
        let b = self.bounds_for(k);
        if b.len() != k {
            return Err(Error::InvalidConfig(format!("{} bounds for {k} weights", b.len())));
        }
        if b.iter().any(|[lo, hi]| !(lo < hi) || *lo < 0.0 || !hi.is_finite()) {
            return Err(Error::InvalidConfig("bounds need 0 <= lo < hi".into()));
        }
        if !(self.length_scale > 0.0) || !(self.noise_variance > 0.0) || !(self.xi >= 0.0) {
            return Err(Error::InvalidConfig(
                "length_scale and noise_variance must be positive, xi non-negative".into(),
            ));
        }
        if self.n_candidates == 0 {
            return Err(Error::InvalidConfig("n_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// What an objective returns: the loss and, optionally, its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub bce_term: Option<f64>,
    pub cmi_term: Option<f64>,
}

impl From<f64> for ObjectiveValue {
    fn from(loss: f64) -> Self {
        Self {
            loss,
            bce_term: None,
            cmi_term: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub points: Vec<WeightVector>,
    pub values: Vec<ObjectiveValue>,
    pub best_index: usize,
    pub best_point: WeightVector,
    pub best_value: f64,
}

impl BoTrace {
    /// Running minimum of the finite objective values.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.values
            .iter()
            .map(|v| {
                if v.loss.is_finite() && v.loss < best {
                    best = v.loss;
                }
                best
            })
            .collect()
    }

    /// CSV with columns `trial, w_1..w_K, loss, cmi_term, bce_term`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let k = self.best_point.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["trial".to_string()];
        header.extend((1..=k).map(|i| format!("w_{i}")));
        header.extend(["loss", "cmi_term", "bce_term"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, (p, v)) in self.points.iter().zip(&self.values).enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.as_slice().iter().map(|x| x.to_string()));
            row.push(v.loss.to_string());
            row.push(opt(v.cmi_term));
            row.push(opt(v.bce_term));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }
}

fn kernel_value(kind: Kernel, r: f64) -> f64 {
    match kind {
        Kernel::Matern52 => {
            let s = 5f64.sqrt() * r;
            (1.0 + s + s * s / 3.0) * (-s).exp()
        }
        Kernel::Rbf => (-0.5 * r * r).exp(),
    }
}

fn scaled_distance(a: &[f64], b: &[f64], length_scale: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
        / length_scale
}

/// A fitted GP on z-scored targets, queried in the coordinates it was fit in.
struct Gp {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    kernel: Kernel,
    length_scale: f64,
}

impl Gp {
    fn fit(xs: &[Vec<f64>], ys: &[f64], kernel: Kernel, length_scale: f64, noise: f64) -> Result<Self> {
        let n = xs.len();
        if n == 0 || ys.len() != n {
            return Err(Error::LengthMismatch(n, ys.len()));
        }
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, ys.iter().map(|y| (y - y_mean) / y_scale));
        let gram = DMatrix::from_fn(n, n, |i, j| {
            kernel_value(kernel, scaled_distance(&xs[i], &xs[j], length_scale))
        });
        let mut jitter = 1e-8;
        let chol = loop {
            let mut m = gram.clone();
            for i in 0..n {
                m[(i, i)] += noise + jitter;
            }
            if let Some(c) = Cholesky::new(m) {
                break c;
            }
            if jitter >= 1e-4 {
                return Err(Error::SingularKernel { jitter });
            }
            jitter *= 10.0;
        };
        let alpha = chol.solve(&z);
        Ok(Self {
            xs: xs.to_vec(),
            chol,
            alpha,
            y_mean,
            y_scale,
            kernel,
            length_scale,
        })
    }

    /// Posterior mean and variance in z-units.
    fn predict_z(&self, q: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .map(|x| kernel_value(self.kernel, scaled_distance(x, q, self.length_scale))),
        );
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).unwrap_or_else(|| ks.clone());
        let var = (1.0 - v.dot(&v)).max(0.0);
        (mean, var)
    }

    fn predict(&self, q: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_z(q);
        (self.y_mean + self.y_scale * m, v * self.y_scale * self.y_scale)
    }
}

/// Exact GP regression with constant prior mean equal to the observation
/// mean and prior variance equal to the observation variance (1 when the
/// observations are constant). Returns `(mean, variance)` per query.
pub fn gp_posterior(
    points: &[Vec<f64>],
    values: &[f64],
    queries: &[Vec<f64>],
    cfg: &BoConfig,
) -> Result<Vec<(f64, f64)>> {
    let gp = Gp::fit(points, values, cfg.kernel, cfg.length_scale, cfg.noise_variance)?;
    Ok(queries.iter().map(|q| gp.predict(q)).collect())
}

/// Expected improvement for minimization.
pub fn expected_improvement(mean: f64, variance: f64, best_so_far: f64, xi: f64) -> f64 {
    let gain = best_so_far - mean - xi;
    let sigma = variance.max(0.0).sqrt();
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let n = Normal::standard();
    (gain * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

fn latin_hypercube(n: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; k]; n];
    for d in 0..k {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (p, s) in pts.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

fn to_weights(unit: &[f64], bounds: &[[f64; 2]]) -> Vec<f64> {
    unit.iter()
        .zip(bounds)
        .map(|(u, [lo, hi])| lo + u * (hi - lo))
        .collect()
}

/// Surrogate targets: non-finite losses become `worst + 3 * range`.
fn surrogate_targets(values: &[ObjectiveValue]) -> Option<Vec<f64>> {
    let finite: Vec<f64> = values.iter().map(|v| v.loss).filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let worst = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let range = if worst > best { worst - best } else { 1.0 };
    Some(
        values
            .iter()
            .map(|v| if v.loss.is_finite() { v.loss } else { worst + 3.0 * range })
            .collect(),
    )
}

/// Picks the next point in unit coordinates by maximizing EI over random
/// candidates, then refining the best few by coordinate search.
fn propose(gp: &Gp, best_z: f64, cfg: &BoConfig, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let ei = |q: &[f64]| {
        let (m, v) = gp.predict_z(q);
        expected_improvement(m, v, best_z, cfg.xi / gp.y_scale)
    };
    let mut scored: Vec<(f64, Vec<f64>)> = (0..cfg.n_candidates)
        .map(|_| {
            let q: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            (ei(&q), q)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(5);
    let mut best = scored[0].clone();
    for (mut value, mut q) in scored {
        let mut step = 0.1;
        while step >= 1e-3 {
            let mut moved = false;
            for d in 0..k {
                for dir in [1.0, -1.0] {
                    let mut c = q.clone();
                    c[d] = (c[d] + dir * step).clamp(0.0, 1.0);
                    let e = ei(&c);
                    if e > value {
                        value = e;
                        q = c;
                        moved = true;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if value > best.0 {
            best = (value, q);
        }
    }
    best.1
}

/// Minimizes `objective` over K stratum weights inside the configured box.
///
/// Non-finite objective values are kept in the trace but replaced by a
/// pessimistic value for the surrogate.
pub fn minimize<F, V>(mut objective: F, k: usize, cfg: &BoConfig) -> Result<BoTrace>
where
    F: FnMut(&WeightVector) -> V,
    V: Into<ObjectiveValue>,
{
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    cfg.validate(k)?;
    let bounds = cfg.bounds_for(k);
    let mut rng = rng::stream(cfg.seed, "bo/proposals");
    let mut units = latin_hypercube(cfg.n_init_for(k), k, &mut rng);
    let mut points: Vec<WeightVector> = Vec::new();
    let mut values: Vec<ObjectiveValue> = Vec::new();
    let mut evaluate = |unit: &[f64], points: &mut Vec<WeightVector>, values: &mut Vec<ObjectiveValue>| {
        let w = to_weights(unit, &bounds);
        let (wv, value) = match WeightVector::new(w.clone()) {
            Ok(wv) => {
                let v = objective(&wv).into();
                (wv, v)
            }
            // All-zero point of a box that touches zero.
            Err(_) => (WeightVector::uniform(k), ObjectiveValue::from(f64::NAN)),
        };
        log::debug!("bo trial {}: w={:?} loss={}", points.len(), wv.as_slice(), value.loss);
        points.push(wv);
        values.push(value);
    };
    for u in &units {
        evaluate(u, &mut points, &mut values);
    }
    for _ in 0..cfg.n_iter {
        let next = match surrogate_targets(&values) {
            None => (0..k).map(|_| rng.random::<f64>()).collect(),
            Some(ys) => {
                let gp = Gp::fit(&units, &ys, cfg.kernel, cfg.length_scale, cfg.noise_variance)?;
                let best_z = ys
                    .iter()
                    .map(|y| (y - gp.y_mean) / gp.y_scale)
                    .fold(f64::INFINITY, f64::min);
                propose(&gp, best_z, cfg, k, &mut rng)
            }
        };
        evaluate(&next, &mut points, &mut values);
        units.push(next);
    }
    let mut best_index = None;
    for (i, v) in values.iter().enumerate() {
        if v.loss.is_finite() && best_index.is_none_or(|b: usize| v.loss < values[b].loss) {
            best_index = Some(i);
        }
    }
    let best_index = best_index.ok_or(Error::ObjectiveAlwaysNonFinite)?;
    Ok(BoTrace {
        best_point: points[best_index].clone(),
        best_value: values[best_index].loss,
        best_index,
        points,
        values,
    })
}
