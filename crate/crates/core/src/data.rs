//! Interaction records, datasets, and the invariants every other module
//! relies on.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value of the single designated bias attribute of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiasValue {
    Real(f64),
    Label(String),
}

impl BiasValue {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            BiasValue::Real(v) => Some(*v),
            BiasValue::Label(_) => None,
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            BiasValue::Real(_) => None,
            BiasValue::Label(l) => Some(l),
        }
    }
}

/// One logged (user, item) event.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    /// Relevant features.
    pub x_r: Vec<f64>,
    /// The non-relevant bias attribute.
    pub x_nr: BiasValue,
    pub exposure: u8,
    pub click: u8,
}

impl InteractionRecord {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        x_r: Vec<f64>,
        x_nr: BiasValue,
        exposure: u8,
        click: u8,
    ) -> Self {
        Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            x_r,
            x_nr,
            exposure,
            click,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    /// Missing-at-random reference data.
    Benchmark,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Benchmark => "benchmark",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    Continuous,
    Categorical,
}

/// An ordered, non-empty collection of interaction records.
///
/// Datasets are immutable once built; every transformation returns a new
/// value and preserves record order unless documented otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<InteractionRecord>,
    feature_dim: usize,
    split: Split,
    x_nr_kind: BiasKind,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset. `feature_dim` is taken from the first record; use
    /// [`validate`] to check that the remaining records agree.
    pub fn new(records: Vec<InteractionRecord>, split: Split, x_nr_kind: BiasKind) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let feature_dim = first.x_r.len();
        let feature_names = (0..feature_dim).map(|j| format!("x{j}")).collect();
        Ok(Self {
            records,
            feature_dim,
            split,
            x_nr_kind,
            feature_names,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.feature_dim {
            return Err(Error::SchemaMismatch {
                expected: self.feature_dim,
                got: names.len(),
            });
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<InteractionRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn x_nr_kind(&self) -> BiasKind {
        self.x_nr_kind
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn clicks(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.click).collect()
    }

    pub fn exposures(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.exposure).collect()
    }

    /// Real-valued bias attribute column; `None` for categorical datasets.
    pub fn x_nr_values(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.x_nr.as_real()).collect()
    }

    /// Sorted distinct labels of a categorical bias attribute.
    pub fn x_nr_labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .records
            .iter()
            .filter_map(|r| r.x_nr.as_label())
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// New dataset holding the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        self.rebuild(records)
    }

    /// Plain union of rows: `self` first, then `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if other.feature_dim != self.feature_dim {
            return Err(Error::SchemaMismatch {
                expected: self.feature_dim,
                got: other.feature_dim,
            });
        }
        if other.x_nr_kind != self.x_nr_kind {
            return Err(Error::InvalidDataset(
                "cannot concatenate datasets with different bias attribute kinds".into(),
            ));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        self.rebuild(records)
    }

    /// Same schema and split, different rows.
    pub fn rebuild(&self, records: Vec<InteractionRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            records,
            feature_dim: self.feature_dim,
            split: self.split,
            x_nr_kind: self.x_nr_kind,
            feature_names: self.feature_names.clone(),
        })
    }

    /// Fraction of rows that repeat an earlier (user, item) pair.
    pub fn duplicate_rate(&self) -> f64 {
        let mut seen = std::collections::HashSet::with_capacity(self.len());
        let dups = self
            .records
            .iter()
            .filter(|r| !seen.insert((r.user_id.as_str(), r.item_id.as_str())))
            .count();
        dups as f64 / self.len() as f64
    }
}

/// A broken invariant at a given row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub row: usize,
    pub rule: &'static str,
}

pub const RULE_CLICK_IMPLIES_EXPOSURE: &str = "click-implies-exposure";
pub const RULE_FEATURE_DIM: &str = "feature-dim";
pub const RULE_BINARY: &str = "binary";
pub const RULE_X_NR_KIND: &str = "x-nr-kind";
pub const RULE_NON_FINITE: &str = "non-finite";

/// Checks every record invariant. Returns one violation per offending
/// record and rule, in row order.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for (row, r) in dataset.records.iter().enumerate() {
        if r.x_r.len() != dataset.feature_dim {
            out.push(Violation {
                row,
                rule: RULE_FEATURE_DIM,
            });
        }
        if r.exposure > 1 || r.click > 1 {
            out.push(Violation {
                row,
                rule: RULE_BINARY,
            });
        }
        if r.click == 1 && r.exposure == 0 {
            out.push(Violation {
                row,
                rule: RULE_CLICK_IMPLIES_EXPOSURE,
            });
        }
        let kind_ok = match (&r.x_nr, dataset.x_nr_kind) {
            (BiasValue::Real(v), BiasKind::Continuous) => v.is_finite(),
            (BiasValue::Label(_), BiasKind::Categorical) => true,
            _ => false,
        };
        if !kind_ok {
            out.push(Violation {
                row,
                rule: RULE_X_NR_KIND,
            });
        }
        if r.x_r.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                row,
                rule: RULE_NON_FINITE,
            });
        }
    }
    out
}

/// Fails with [`Error::InvalidDataset`] on the first violation.
pub fn ensure_valid(dataset: &Dataset) -> Result<()> {
    match validate(dataset).first() {
        None => Ok(()),
        Some(v) => Err(Error::InvalidDataset(format!(
            "row {} breaks `{}`",
            v.row, v.rule
        ))),
    }
}

/// Per-feature affine transform `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations; zero-variance
    /// columns get mean 0 and scale 1 so they pass through unchanged.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut scale = Vec::with_capacity(dim);
        for (j, s) in var.into_iter().enumerate() {
            let sd = (s / n).sqrt();
            if sd > 1e-12 * mean[j].abs().max(1.0) {
                scale.push(sd);
            } else {
                mean[j] = 0.0;
                scale.push(1.0);
            }
        }
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), (m, s)) in out.iter_mut().zip(x).zip(self.mean.iter().zip(&self.scale)) {
            *o = (v - m) / s;
        }
    }

    /// Applies the transform to every record's `x_r`.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.feature_dim() != self.dim() {
            return Err(Error::SchemaMismatch {
                expected: self.dim(),
                got: dataset.feature_dim(),
            });
        }
        let records = dataset
            .records()
            .iter()
            .map(|r| InteractionRecord {
                x_r: self.apply_row(&r.x_r),
                ..r.clone()
            })
            .collect();
        dataset.rebuild(records)
    }
}

/// Standardizes every `x_r` column to mean 0 and population sd 1.
pub fn standardize_features(dataset: &Dataset) -> Result<(Dataset, FeatureTransform)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: dataset.len(),
        });
    }
    if dataset.feature_dim() == 0 {
        return Err(Error::InvalidDataset("feature_dim must be at least 1".into()));
    }
    ensure_dims(dataset)?;
    let rows: Vec<&[f64]> = dataset.records().iter().map(|r| r.x_r.as_slice()).collect();
    let transform = FeatureTransform::fit(&rows);
    let out = transform.apply(dataset)?;
    Ok((out, transform))
}

pub(crate) fn ensure_dims(dataset: &Dataset) -> Result<()> {
    for r in dataset.records() {
        if r.x_r.len() != dataset.feature_dim() {
            return Err(Error::SchemaMismatch {
                expected: dataset.feature_dim(),
                got: r.x_r.len(),
            });
        }
    }
    Ok(())
}
