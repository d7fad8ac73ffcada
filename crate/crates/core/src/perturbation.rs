//! Stratification of the bias attribute and weighted resampling of rows.

use serde::{Deserialize, Serialize};

use crate::data::{BiasKind, BiasValue, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, CounterRng};

/// Bin index of every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub bins: Vec<usize>,
    /// Effective number of bins; every index in `bins` is below this.
    pub k: usize,
    /// The K that was asked for.
    pub requested_k: usize,
    /// Upper edges of bins `0..k-1` (continuous attributes only). A value
    /// equal to an edge belongs to the lower bin.
    pub bin_edges: Vec<f64>,
    /// Label of each bin (categorical attributes only).
    pub labels: Vec<String>,
    /// Set when the attribute had too little variation for `requested_k`.
    pub degenerate: bool,
}

impl BinAssignment {
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &b in &self.bins {
            counts[b] += 1;
        }
        counts
    }

    /// Bin of a new attribute value under these edges or labels.
    pub fn assign(&self, value: &BiasValue) -> Option<usize> {
        match value {
            BiasValue::Real(v) if self.labels.is_empty() => {
                Some(self.bin_edges.partition_point(|e| e < v))
            }
            BiasValue::Label(l) => self.labels.iter().position(|x| x == l),
            _ => None,
        }
    }

    /// Re-bins another dataset with the edges learned here.
    pub fn apply(&self, dataset: &Dataset) -> Result<BinAssignment> {
        let bins = dataset
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.assign(&r.x_nr).ok_or_else(|| {
                    Error::InvalidDataset(format!("row {i}: bias attribute not in bin map"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BinAssignment {
            bins,
            ..self.clone()
        })
    }
}

/// Resampling weight per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidWeights("K must be at least 1".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "weights must be finite and non-negative: {w:?}"
            )));
        }
        if !w.iter().any(|v| *v > 0.0) {
            return Err(Error::InvalidWeights("at least one weight must be positive".into()));
        }
        Ok(Self(w))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weights relative to the largest one, snapped to a 2^-32 grid so that
    /// `w` and `c * w` map to the same integers.
    fn quantized(&self) -> Vec<u64> {
        let max = self.0.iter().cloned().fold(0.0, f64::max);
        self.0
            .iter()
            .map(|w| ((w / max) * 4_294_967_296.0).round() as u64)
            .collect()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        WeightVector::new(value)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// Keep a uniform `1 - rho` share of rows, redraw the rest by weight.
    Partial,
    /// Redraw all N rows by weight.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub perturb_fraction: f64,
    pub mode: PerturbMode,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            perturb_fraction: 0.1,
            mode: PerturbMode::Partial,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.perturb_fraction) {
            return Err(Error::InvalidConfig(format!(
                "perturb_fraction must lie in [0, 1], got {}",
                self.perturb_fraction
            )));
        }
        Ok(())
    }
}

/// K used when a continuous attribute is binned without an explicit K.
pub const DEFAULT_K: usize = 5;

/// K for a dataset: categorical attributes default to their label count,
/// continuous ones to [`DEFAULT_K`].
pub fn resolve_k(dataset: &Dataset, requested: Option<usize>) -> Result<usize> {
    match (requested, dataset.x_nr_kind()) {
        (Some(0), _) => Err(Error::InvalidConfig("K must be at least 1".into())),
        (Some(k), _) => Ok(k),
        (None, BiasKind::Categorical) => Ok(dataset.x_nr_labels().len()),
        (None, BiasKind::Continuous) => Ok(DEFAULT_K),
    }
}

/// Splits the bias attribute into strata.
///
/// Continuous attributes use equal-frequency bins with edges at the `j/K`
/// empirical quantiles (linear interpolation). When the attribute has at
/// most K distinct values each value gets its own bin instead. Categorical
/// attributes map labels in sorted order and require K to equal the label
/// count.
pub fn discretize(dataset: &Dataset, k: usize) -> Result<BinAssignment> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    match dataset.x_nr_kind() {
        BiasKind::Categorical => discretize_categorical(dataset, k),
        BiasKind::Continuous => {
            let values = dataset.x_nr_values().ok_or_else(|| {
                Error::InvalidDataset("continuous dataset holds categorical x_nr".into())
            })?;
            discretize_values(&values, k)
        }
    }
}

fn discretize_categorical(dataset: &Dataset, k: usize) -> Result<BinAssignment> {
    let labels = dataset.x_nr_labels();
    if labels.len() != k {
        return Err(Error::KMismatch {
            k,
            labels: labels.len(),
        });
    }
    let bins = dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.x_nr
                .as_label()
                .and_then(|l| labels.iter().position(|x| x == l))
                .ok_or_else(|| Error::InvalidDataset(format!("row {i}: expected a label")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinAssignment {
        bins,
        k,
        requested_k: k,
        bin_edges: Vec::new(),
        labels,
        degenerate: false,
    })
}

/// Quantile binning of raw values; see [`discretize`].
pub fn discretize_values(values: &[f64], k: usize) -> Result<BinAssignment> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite bias attribute".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();

    let edges: Vec<f64> = if distinct.len() <= k {
        distinct[..distinct.len() - 1].to_vec()
    } else {
        let mut edges: Vec<f64> = (1..k)
            .map(|j| quantile_sorted(&sorted, j as f64 / k as f64))
            .collect();
        edges.dedup();
        edges
    };

    let mut bins: Vec<usize> = values
        .iter()
        .map(|v| edges.partition_point(|e| e < v))
        .collect();

    // Drop bins that received no rows.
    let mut counts = vec![0usize; edges.len() + 1];
    for &b in &bins {
        counts[b] += 1;
    }
    let occupied: Vec<usize> = (0..counts.len()).filter(|&b| counts[b] > 0).collect();
    let mut remap = vec![0usize; counts.len()];
    for (new, &old) in occupied.iter().enumerate() {
        remap[old] = new;
    }
    let effective = occupied.len();
    let kept_edges: Vec<f64> = occupied[..effective - 1].iter().map(|&b| edges[b]).collect();
    for b in bins.iter_mut() {
        *b = remap[*b];
    }
    Ok(BinAssignment {
        bins,
        k: effective,
        requested_k: k,
        bin_edges: kept_edges,
        labels: Vec::new(),
        degenerate: effective < k,
    })
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Share of draws each stratum receives: `n_k w_k / sum_j n_j w_j`.
pub fn effective_sampling_distribution(
    bins: &BinAssignment,
    weights: &WeightVector,
) -> Result<Vec<f64>> {
    check_k(bins, weights)?;
    let mass: Vec<f64> = bins
        .counts()
        .iter()
        .zip(weights.as_slice())
        .map(|(&n, &w)| n as f64 * w)
        .collect();
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroWeightCoverage);
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

fn check_k(bins: &BinAssignment, weights: &WeightVector) -> Result<()> {
    if bins.k != weights.len() {
        return Err(Error::WeightLength {
            bins: bins.k,
            weights: weights.len(),
        });
    }
    Ok(())
}

/// Source row of each output row, in output order.
///
/// Partial mode lists the kept rows first, in input order, followed by the
/// weighted draws in draw order.
pub fn resample_indices(
    bins: &BinAssignment,
    weights: &WeightVector,
    cfg: &PerturbationConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    check_k(bins, weights)?;
    let n = bins.bins.len();
    let q = weights.quantized();
    let mut cumulative = Vec::with_capacity(n);
    let mut total: u64 = 0;
    for &b in &bins.bins {
        total += q[b];
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::AllZeroWeightCoverage);
    }

    let (mut out, n_draw) = match cfg.mode {
        PerturbMode::Full => (Vec::with_capacity(n), n),
        PerturbMode::Partial => {
            let n_draw = ((cfg.perturb_fraction * n as f64) + 1e-9).floor() as usize;
            let n_draw = n_draw.min(n);
            let n_keep = n - n_draw;
            let mut keep_rng = rng::stream(cfg.seed, "perturb/keep");
            let mut kept = rand::seq::index::sample(&mut keep_rng, n, n_keep).into_vec();
            kept.sort_unstable();
            kept.reserve(n_draw);
            (kept, n_draw)
        }
    };

    let mut draws = CounterRng::new(rng::derive_seed(cfg.seed, "perturb/draw"));
    for i in 0..n_draw {
        let u = draws.uniform(i as u64);
        let target = ((u * total as f64) as u64).min(total - 1);
        // First row whose cumulative mass exceeds the target.
        let row = cumulative.partition_point(|&c| c <= target);
        out.push(row);
    }
    Ok(out)
}

/// Resamples rows of `dataset` with probability proportional to the weight
/// of their stratum. Deterministic given `cfg.seed`.
pub fn resample(
    dataset: &Dataset,
    bins: &BinAssignment,
    weights: &WeightVector,
    cfg: &PerturbationConfig,
) -> Result<Dataset> {
    if bins.bins.len() != dataset.len() {
        return Err(Error::LengthMismatch(bins.bins.len(), dataset.len()));
    }
    let idx = resample_indices(bins, weights, cfg)?;
    dataset.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InteractionRecord, Split};

    fn continuous(values: &[f64]) -> Dataset {
        let recs = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                InteractionRecord::new(
                    format!("u{i}"),
                    "i",
                    vec![i as f64],
                    BiasValue::Real(*v),
                    1,
                    0,
                )
            })
            .collect();
        Dataset::new(recs, Split::Eval, BiasKind::Continuous).unwrap()
    }

    fn categorical(labels: &[&str]) -> Dataset {
        let recs = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                InteractionRecord::new(
                    format!("u{i}"),
                    "i",
                    vec![0.0],
                    BiasValue::Label(l.to_string()),
                    1,
                    0,
                )
            })
            .collect();
        Dataset::new(recs, Split::Eval, BiasKind::Categorical).unwrap()
    }

    #[test]
    fn median_split() {
        let b = discretize(&continuous(&[0.1, 0.2, 0.8, 0.9]), 2).unwrap();
        assert_eq!(b.bins, vec![0, 0, 1, 1]);
        assert_eq!(b.bin_edges.len(), 1);
        assert!((b.bin_edges[0] - 0.5).abs() < 1e-12);
        assert!(!b.degenerate);
    }

    #[test]
    fn constant_attribute_is_degenerate() {
        let b = discretize(&continuous(&[0.4; 6]), 3).unwrap();
        assert_eq!(b.k, 1);
        assert!(b.degenerate);
        assert!(b.bins.iter().all(|&x| x == 0));
    }

    #[test]
    fn ties_at_edge_go_low() {
        // Edge lands exactly on 2.0.
        let b = discretize(&continuous(&[1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 5.0]), 2).unwrap();
        assert_eq!(b.bin_edges, vec![2.0]);
        assert_eq!(b.bins, vec![0, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn few_distinct_values_get_one_bin_each() {
        let b = discretize(&continuous(&[0.3, 0.1, 0.1, 0.3, 0.2]), 3).unwrap();
        assert_eq!(b.k, 3);
        assert_eq!(b.bins, vec![2, 0, 0, 2, 1]);
        assert!(!b.degenerate);
    }

    #[test]
    fn quantile_bins_are_balanced() {
        let values: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let b = discretize(&continuous(&values), 5).unwrap();
        assert_eq!(b.counts(), vec![200; 5]);
    }

    #[test]
    fn categorical_mapping_and_k_check() {
        let d = categorical(&["b", "a", "c", "a"]);
        let b = discretize(&d, 3).unwrap();
        assert_eq!(b.bins, vec![1, 0, 2, 0]);
        assert_eq!(b.labels, vec!["a", "b", "c"]);
        assert!(matches!(
            discretize(&d, 2),
            Err(Error::KMismatch { k: 2, labels: 3 })
        ));
    }

    #[test]
    fn effective_distribution_formula() {
        let bins = BinAssignment {
            bins: [vec![0; 10], vec![1; 10]].concat(),
            k: 2,
            requested_k: 2,
            bin_edges: vec![0.5],
            labels: vec![],
            degenerate: false,
        };
        let q = effective_sampling_distribution(&bins, &WeightVector::new(vec![1.0, 3.0]).unwrap())
            .unwrap();
        assert!((q[0] - 0.25).abs() < 1e-12 && (q[1] - 0.75).abs() < 1e-12);
        let q = effective_sampling_distribution(&bins, &WeightVector::uniform(2)).unwrap();
        assert_eq!(q, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_weight_bins_are_never_drawn() {
        let d = continuous(&(0..100).map(f64::from).collect::<Vec<_>>());
        let bins = discretize(&d, 2).unwrap();
        let cfg = PerturbationConfig {
            mode: PerturbMode::Full,
            seed: 3,
            ..Default::default()
        };
        let w = WeightVector::new(vec![1.0, 0.0]).unwrap();
        let idx = resample_indices(&bins, &w, &cfg).unwrap();
        assert_eq!(idx.len(), 100);
        assert!(idx.iter().all(|&i| bins.bins[i] == 0));
    }

    #[test]
    fn zero_fraction_partial_returns_input() {
        let d = continuous(&[0.5, 0.1, 0.9, 0.3]);
        let bins = discretize(&d, 2).unwrap();
        let cfg = PerturbationConfig {
            perturb_fraction: 0.0,
            mode: PerturbMode::Partial,
            seed: 11,
        };
        let out = resample(&d, &bins, &WeightVector::uniform(2), &cfg).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn partial_mode_sizes() {
        let d = continuous(&(0..10).map(f64::from).collect::<Vec<_>>());
        let bins = discretize(&d, 2).unwrap();
        let cfg = PerturbationConfig {
            perturb_fraction: 0.1,
            mode: PerturbMode::Partial,
            seed: 5,
        };
        let idx = resample_indices(&bins, &WeightVector::uniform(2), &cfg).unwrap();
        assert_eq!(idx.len(), 10);
        // Nine kept rows in input order, one weighted draw.
        assert!(idx[..9].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn errors_on_mismatch_and_zero_coverage() {
        let d = continuous(&[0.1, 0.2, 0.8, 0.9]);
        let bins = discretize(&d, 2).unwrap();
        let cfg = PerturbationConfig::default();
        assert!(matches!(
            resample(&d, &bins, &WeightVector::uniform(3), &cfg),
            Err(Error::WeightLength { .. })
        ));
        // Weight only on a bin with no rows.
        let lopsided = BinAssignment {
            bins: vec![0; 4],
            k: 2,
            ..bins.clone()
        };
        let w = WeightVector::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            resample(&d, &lopsided, &w, &cfg),
            Err(Error::AllZeroWeightCoverage)
        ));
        assert!(WeightVector::new(vec![0.0, 0.0]).is_err());
        assert!(WeightVector::new(vec![f64::NAN]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
    }

    #[test]
    fn uniform_full_resample_matches_input_proportions() {
        // 3 strata with proportions 0.2 / 0.3 / 0.5. Ten independent blocks
        // of 200 seeded draws of size 100 each give a chi-square statistic
        // with 2 degrees of freedom; their sum has 20.
        let values: Vec<f64> = (0..100)
            .map(|i| if i < 20 { 0.0 } else if i < 50 { 1.0 } else { 2.0 })
            .collect();
        let d = continuous(&values);
        let bins = discretize(&d, 3).unwrap();
        let w = WeightVector::uniform(3);
        let mut chi2_sum = 0.0;
        for block in 0..10u64 {
            let mut counts = [0usize; 3];
            for seed in block * 200..(block + 1) * 200 {
                let cfg = PerturbationConfig {
                    mode: PerturbMode::Full,
                    seed,
                    ..Default::default()
                };
                for i in resample_indices(&bins, &w, &cfg).unwrap() {
                    counts[bins.bins[i]] += 1;
                }
            }
            let total = 200.0 * 100.0;
            let expected = [0.2 * total, 0.3 * total, 0.5 * total];
            chi2_sum += counts
                .iter()
                .zip(expected)
                .map(|(&o, e)| (o as f64 - e).powi(2) / e)
                .sum::<f64>();
        }
        // Upper 1% point of chi-square with 20 degrees of freedom.
        assert!(chi2_sum < 37.566, "chi2 = {chi2_sum}");
    }
}
