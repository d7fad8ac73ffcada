//! Comparison methods: Naive Bayes propensities, IPS-weighted evaluation
//! and propensity-stratified evaluation.

use serde::{Deserialize, Serialize};

use crate::click_model::FittedClickModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Confusion, EvalReport, StratumReport};
use crate::perturbation::BinAssignment;

pub const DEFAULT_CLIP_MIN: f64 = 0.01;

/// Per-rating observation propensities `P(O = 1 | Y = r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Entry `r - 1` holds the propensity of rating `r`.
    pub propensities: Vec<f64>,
    pub observed_rate: f64,
    pub clip_min: f64,
}

impl PropensityModel {
    /// Propensity for a 1-based rating.
    pub fn propensity(&self, rating: u8) -> Option<f64> {
        (rating as usize)
            .checked_sub(1)
            .and_then(|i| self.propensities.get(i))
            .copied()
    }
}

/// Counts of ratings `1..=levels`; out-of-range values are ignored.
pub fn rating_histogram(ratings: impl IntoIterator<Item = u8>, levels: usize) -> Vec<f64> {
    let mut h = vec![0.0; levels];
    for r in ratings {
        if (1..=levels).contains(&(r as usize)) {
            h[r as usize - 1] += 1.0;
        }
    }
    h
}

pub fn fit_nb_propensity(
    mnar_ratings: &[f64],
    mar_ratings: &[f64],
    observed_fraction: f64,
) -> Result<PropensityModel> {
    fit_nb_propensity_clipped(mnar_ratings, mar_ratings, observed_fraction, DEFAULT_CLIP_MIN)
}

/// `P(O=1|Y=r) = P_mnar(Y=r) * P(O=1) / P_mar(Y=r)`, clipped to `[clip_min, 1]`.
pub fn fit_nb_propensity_clipped(
    mnar_ratings: &[f64],
    mar_ratings: &[f64],
    observed_fraction: f64,
    clip_min: f64,
) -> Result<PropensityModel> {
    if mnar_ratings.len() != mar_ratings.len() {
        return Err(Error::LengthMismatch(mnar_ratings.len(), mar_ratings.len()));
    }
    let bad = |h: &[f64]| h.iter().any(|v| !v.is_finite() || *v < 0.0);
    if bad(mnar_ratings) || bad(mar_ratings) {
        return Err(Error::InvalidWeights("histograms must be finite and non-negative".into()));
    }
    let mnar_total: f64 = mnar_ratings.iter().sum();
    let mar_total: f64 = mar_ratings.iter().sum();
    if mnar_ratings.is_empty() || mnar_total <= 0.0 || mar_total <= 0.0 {
        return Err(Error::EmptyCounts);
    }
    if !(observed_fraction > 0.0 && observed_fraction <= 1.0) {
        return Err(Error::InvalidConfig("observed_fraction must lie in (0, 1]".into()));
    }
    if !(clip_min > 0.0 && clip_min <= 1.0) {
        return Err(Error::InvalidConfig("clip_min must lie in (0, 1]".into()));
    }
    let mut propensities = Vec::with_capacity(mnar_ratings.len());
    for (r, (&mnar, &mar)) in mnar_ratings.iter().zip(mar_ratings).enumerate() {
        let p = if mar == 0.0 {
            if mnar > 0.0 {
                return Err(Error::ZeroMarMass { rating: r + 1 });
            }
            // Rating absent from both samples.
            observed_fraction
        } else {
            (mnar / mnar_total) * observed_fraction / (mar / mar_total)
        };
        propensities.push(p.clamp(clip_min, 1.0));
    }
    log::debug!("naive Bayes propensities {propensities:?} (clip {clip_min})");
    Ok(PropensityModel {
        propensities,
        observed_rate: observed_fraction,
        clip_min,
    })
}

/// IPS and self-normalized IPS reports. Ratio metrics (precision, recall,
/// F1, AUC) are identical under both; the confusion rates differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpsEvaluation {
    pub ips: EvalReport,
    pub snips: EvalReport,
}

/// Inverse-propensity weights rescaled for exact arithmetic: integral
/// weights are used as they are, others are divided by their minimum so
/// constant propensities collapse to unit weights.
fn metric_weights(propensities: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = propensities.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidWeights(format!("propensity {p} is not positive")));
    }
    let raw: Vec<f64> = propensities.iter().map(|p| 1.0 / p).collect();
    let near_int = |w: f64| (w - w.round()).abs() <= 1e-9 * w.max(1.0);
    if raw.iter().all(|&w| near_int(w)) {
        return Ok(raw.iter().map(|w| w.round()).collect());
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(raw.iter().map(|w| w / min).collect())
}

pub fn ips_evaluate(
    model: &FittedClickModel,
    dataset: &Dataset,
    propensities: &[f64],
    threshold: f64,
) -> Result<IpsEvaluation> {
    let scores = model.predict_dataset(dataset)?;
    ips_evaluate_scores(&scores, &dataset.clicks(), propensities, threshold)
}

pub fn ips_evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    propensities: &[f64],
    threshold: f64,
) -> Result<IpsEvaluation> {
    if propensities.len() != scores.len() {
        return Err(Error::LengthMismatch(scores.len(), propensities.len()));
    }
    let weights = metric_weights(propensities)?;
    let base = metrics::evaluate_weighted(scores, labels, &weights, threshold)?;
    let raw: Vec<f64> = propensities.iter().map(|p| 1.0 / p).collect();
    let n = scores.len() as f64;
    let total: f64 = raw.iter().sum();
    let mut sums = Confusion::default();
    for ((&s, &l), &w) in scores.iter().zip(labels).zip(&raw) {
        match (s >= threshold, l == 1) {
            (true, true) => sums.tp += w,
            (true, false) => sums.fp += w,
            (false, true) => sums.fn_ += w,
            (false, false) => sums.tn += w,
        }
    }
    let scaled = |d: f64| Confusion {
        tp: sums.tp / d,
        fp: sums.fp / d,
        fn_: sums.fn_ / d,
        tn: sums.tn / d,
    };
    Ok(IpsEvaluation {
        ips: EvalReport {
            confusion: scaled(n),
            ..base.clone()
        },
        snips: EvalReport {
            confusion: scaled(total),
            ..base
        },
    })
}

pub fn stratified_evaluate(
    model: &FittedClickModel,
    dataset: &Dataset,
    bins: &BinAssignment,
    threshold: f64,
) -> Result<EvalReport> {
    let scores = model.predict_dataset(dataset)?;
    stratified_evaluate_scores(&scores, &dataset.clicks(), bins, threshold)
}

/// Metrics within each stratum, averaged with equal stratum weights.
/// Single-class strata are skipped and flagged. If every stratum is single
/// class, falls back to a pooled evaluation in which each stratum carries
/// equal total weight, and flags that.
pub fn stratified_evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    bins: &BinAssignment,
    threshold: f64,
) -> Result<EvalReport> {
    if bins.bins.len() != scores.len() {
        return Err(Error::LengthMismatch(scores.len(), bins.bins.len()));
    }
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins.k];
    for (row, &b) in bins.bins.iter().enumerate() {
        members[b].push(row);
    }
    let mut strata = Vec::new();
    let mut flags = Vec::new();
    for (stratum, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            flags.push(format!("stratum {stratum} empty"));
            continue;
        }
        let s: Vec<f64> = rows.iter().map(|&r| scores[r]).collect();
        let l: Vec<u8> = rows.iter().map(|&r| labels[r]).collect();
        let rep = metrics::evaluate(&s, &l, threshold)?;
        let skipped = rep.auc.is_none();
        if skipped {
            flags.push(format!("stratum {stratum} single-class, skipped"));
        }
        strata.push(StratumReport {
            stratum,
            n_rows: rows.len(),
            auc: rep.auc,
            precision: rep.precision,
            recall: rep.recall,
            f1: rep.f1,
            skipped,
        });
    }
    if strata.is_empty() {
        return Err(Error::AllStrataEmpty);
    }
    let used: Vec<&StratumReport> = strata.iter().filter(|s| !s.skipped).collect();
    let (auc, precision, recall) = if used.is_empty() {
        flags.push("no stratum has both classes; pooled equal-stratum-weight fallback".into());
        let weights: Vec<f64> = bins
            .bins
            .iter()
            .map(|&b| 1.0 / members[b].len() as f64)
            .collect();
        let pooled = metrics::evaluate_weighted(scores, labels, &weights, threshold)?;
        (pooled.auc, pooled.precision, pooled.recall)
    } else {
        let m = used.len() as f64;
        (
            Some(used.iter().map(|s| s.auc.unwrap_or(0.0)).sum::<f64>() / m),
            used.iter().map(|s| s.precision).sum::<f64>() / m,
            used.iter().map(|s| s.recall).sum::<f64>() / m,
        )
    };
    let plain = metrics::evaluate(scores, labels, threshold)?;
    Ok(EvalReport {
        scenario: String::new(),
        auc,
        precision,
        recall,
        f1: metrics::f1_score(precision, recall),
        threshold,
        n_rows: scores.len(),
        confusion: plain.confusion,
        strata: Some(strata),
        wasserstein: None,
        flags,
    })
}
