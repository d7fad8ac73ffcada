//! Pointwise click-prediction metrics and 1-D Wasserstein distances.

use serde::{Deserialize, Serialize};

use crate::click_model::FittedClickModel;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Confusion-matrix entries. Raw counts for plain evaluation, weighted and
/// normalized rates for IPS/SNIPS.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: usize,
    pub n_rows: usize,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Excluded from the AUC average (single-class stratum).
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WassersteinDiagnostics {
    /// W1 between predictions with and without the bias factor.
    pub prediction_gap: f64,
    /// W1 between bias-free predictions on two designated row subsets.
    pub subset_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_rows: usize,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<Vec<StratumReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wasserstein: Option<WassersteinDiagnostics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn with_scenario(mut self, scenario: impl Into<String>) -> Self {
        self.scenario = scenario.into();
        self
    }

    /// AUC or an error when it is undefined.
    pub fn auc_defined(&self) -> Result<f64> {
        self.auc.ok_or(Error::DegenerateLabels)
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let d = precision + recall;
    if d > 0.0 {
        2.0 * precision * recall / d
    } else {
        0.0
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Unweighted evaluation at `threshold` (score >= threshold is positive).
pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    evaluate_weighted(scores, labels, &vec![1.0; scores.len()], threshold)
}

/// Evaluation with per-row weights: weighted confusion entries and the
/// weighted pairwise concordance AUC. Unit weights reproduce
/// [`evaluate`] exactly.
pub fn evaluate_weighted(
    scores: &[f64],
    labels: &[u8],
    weights: &[f64],
    threshold: f64,
) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if weights.len() != scores.len() {
        return Err(Error::LengthMismatch(scores.len(), weights.len()));
    }
    if let Some(row) = labels.iter().position(|&l| l > 1) {
        return Err(Error::NonBinaryVariables { row });
    }
    let mut c = Confusion::default();
    for ((&s, &l), &w) in scores.iter().zip(labels).zip(weights) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += w,
            (true, false) => c.fp += w,
            (false, true) => c.fn_ += w,
            (false, false) => c.tn += w,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Ok(EvalReport {
        scenario: String::new(),
        auc: weighted_auc(scores, labels, weights),
        precision,
        recall,
        f1: f1_score(precision, recall),
        threshold,
        n_rows: scores.len(),
        confusion: c,
        strata: None,
        wasserstein: None,
        flags: Vec::new(),
    })
}

/// Mann-Whitney AUC with ties counted one half, computed over tie groups of
/// the sorted scores. `None` if either class has zero weight.
pub fn weighted_auc(scores: &[f64], labels: &[u8], weights: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut neg_below = 0.0;
    let mut concordant = 0.0;
    let mut total_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut wp, mut wn) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            let r = order[j];
            if labels[r] == 1 {
                wp += weights[r];
            } else {
                wn += weights[r];
            }
            j += 1;
        }
        concordant += wp * neg_below + 0.5 * wp * wn;
        neg_below += wn;
        total_pos += wp;
        i = j;
    }
    let pairs = total_pos * neg_below;
    (pairs > 0.0).then(|| concordant / pairs)
}

/// 1-Wasserstein distance between two empirical distributions.
pub fn wasserstein_1d(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / a.len() as f64);
    }
    // Integrate |Qa(t) - Qb(t)| over the merged quantile breakpoints
    // i/n and j/m; both quantile functions are constant between them.
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - t) * (a[i] - b[j]).abs();
        t = next;
        // Integer comparison avoids float drift at common breakpoints.
        let lhs = (i + 1) * m;
        let rhs = (j + 1) * n;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(total)
}

/// Score-distribution gaps between a bias-free model and one that also
/// sees the bias attribute.
pub fn conditional_score_gap(
    dataset: &Dataset,
    model_without_bf: &FittedClickModel,
    model_with_bf: &FittedClickModel,
    subsets: Option<(&[usize], &[usize])>,
) -> Result<WassersteinDiagnostics> {
    let dim = dataset.feature_dim();
    for (model, wants_bias) in [(model_without_bf, false), (model_with_bf, true)] {
        if model.schema.x_r_dim != dim {
            return Err(Error::SchemaMismatch {
                expected: dim,
                got: model.schema.x_r_dim,
            });
        }
        if model.schema.includes_bias_factor() != wants_bias {
            return Err(Error::SchemaMismatch {
                expected: dim + usize::from(wants_bias),
                got: model.schema.input_dim(),
            });
        }
    }
    let free = model_without_bf.predict_dataset(dataset)?;
    let with = model_with_bf.predict_dataset(dataset)?;
    let prediction_gap = wasserstein_1d(&free, &with)?;
    let subset_gap = match subsets {
        None => None,
        Some((first, second)) => {
            let pick = |rows: &[usize]| -> Result<Vec<f64>> {
                rows.iter()
                    .map(|&r| {
                        free.get(r).copied().ok_or(Error::LengthMismatch(free.len(), r))
                    })
                    .collect()
            };
            Some(wasserstein_1d(&pick(first)?, &pick(second)?)?)
        }
    };
    Ok(WassersteinDiagnostics {
        prediction_gap,
        subset_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| num / pairs)
    }

    fn brute_prf(scores: &[f64], labels: &[u8], t: f64) -> (f64, f64, f64) {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let tp = pred.iter().zip(labels).filter(|(p, l)| **p && **l == 1).count() as f64;
        let pp = pred.iter().filter(|p| **p).count() as f64;
        let ap = labels.iter().filter(|l| **l == 1).count() as f64;
        let p = if pp > 0.0 { tp / pp } else { 0.0 };
        let r = if ap > 0.0 { tp / ap } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }

    #[test]
    fn perfect_separation() {
        let r = evaluate(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((r.auc, r.precision, r.recall, r.f1), (Some(1.0), 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_ties_give_half() {
        let r = evaluate(&[0.3; 6], &[1, 0, 1, 0, 0, 1], 0.5).unwrap();
        assert_eq!(r.auc, Some(0.5));
    }

    #[test]
    fn interleaved_example_matches_brute_force() {
        let s = [0.9, 0.4, 0.6, 0.1];
        let l = [1, 0, 1, 0];
        let r = evaluate(&s, &l, 0.5).unwrap();
        assert_eq!(r.auc, brute_auc(&s, &l));
        assert_eq!(r.auc, Some(1.0));
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
    }

    #[test]
    fn single_class_auc_is_undefined() {
        let r = evaluate(&[0.1, 0.7], &[1, 1], 0.5).unwrap();
        assert!(r.auc.is_none());
        assert!(matches!(r.auc_defined(), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(evaluate(&[0.1], &[1, 0], 0.5), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn f1_zero_denominator() {
        let r = evaluate(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(matches!(wasserstein_1d(&[], &[1.0]), Err(Error::EmptySample)));
    }

    #[test]
    fn wasserstein_unequal_sizes() {
        // {0, 1} vs {0, 0, 1}: quantiles differ on t in (1/2, 2/3) by 1.
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((w - 1.0 / 6.0).abs() < 1e-15);
        // Replicating every point leaves the distribution unchanged.
        let w = wasserstein_1d(&[0.2, 0.5, 0.9], &[0.2, 0.2, 0.5, 0.5, 0.9, 0.9]).unwrap();
        assert!(w.abs() < 1e-15);
    }

    fn cdf_w1(a: &[f64], b: &[f64]) -> f64 {
        // Independent oracle: integral of |Fa - Fb| over the merged support.
        let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
        pts.sort_by(f64::total_cmp);
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        pts.windows(2).map(|w| (w[1] - w[0]) * (cdf(a, w[0]) - cdf(b, w[0])).abs()).sum()
    }

    proptest! {
        #[test]
        fn evaluate_matches_brute_force(
            rows in prop::collection::vec((0u8..12, 0u8..2), 1..200),
            t in 0u8..12,
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| f64::from(r.0) / 11.0).collect();
            let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let t = f64::from(t) / 11.0;
            let r = evaluate(&scores, &labels, t).unwrap();
            let auc = brute_auc(&scores, &labels);
            match (r.auc, auc) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => prop_assert!(false, "{other:?}"),
            }
            let (p, rc, f) = brute_prf(&scores, &labels, t);
            prop_assert!((r.precision - p).abs() < 1e-12);
            prop_assert!((r.recall - rc).abs() < 1e-12);
            prop_assert!((r.f1 - f).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_to_increasing_transform(
            rows in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..80),
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let moved: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(weighted_auc(&scores, &labels, &vec![1.0; scores.len()]),
                weighted_auc(&moved, &labels, &vec![1.0; scores.len()]));
        }

        #[test]
        fn metrics_permutation_invariant(
            rows in prop::collection::vec((0u8..20, 0u8..2), 2..80),
            rot in 0usize..80,
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| f64::from(r.0) / 19.0).collect();
            let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let k = rot % rows.len();
            let mut s2 = scores.clone();
            let mut l2 = labels.clone();
            s2.rotate_left(k);
            l2.rotate_left(k);
            s2.reverse();
            l2.reverse();
            let a = evaluate(&scores, &labels, 0.5).unwrap();
            let b = evaluate(&s2, &l2, 0.5).unwrap();
            prop_assert_eq!(a.auc, b.auc);
            prop_assert_eq!((a.precision, a.recall, a.f1), (b.precision, b.recall, b.f1));
        }

        #[test]
        fn wasserstein_is_a_metric(
            a in prop::collection::vec(-3.0f64..3.0, 1..30),
            b in prop::collection::vec(-3.0f64..3.0, 1..30),
            c in prop::collection::vec(-3.0f64..3.0, 1..30),
        ) {
            let ab = wasserstein_1d(&a, &b).unwrap();
            let ba = wasserstein_1d(&b, &a).unwrap();
            let bc = wasserstein_1d(&b, &c).unwrap();
            let ac = wasserstein_1d(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(wasserstein_1d(&a, &a).unwrap() == 0.0);
            prop_assert!((ab - cdf_w1(&a, &b)).abs() < 1e-9);
        }
    }
}
