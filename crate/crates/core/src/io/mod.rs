//! Dataset files: the CSV + JSON sidecar format, generic CSV import, and
//! the Coat rating-matrix distribution.

pub mod coat;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BiasKind, BiasValue, Dataset, InteractionRecord, Split};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Sidecar describing a dataset CSV written by [`save_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub format_version: u32,
    pub split: Split,
    pub x_nr_kind: BiasKind,
    pub feature_names: Vec<String>,
    pub n_rows: usize,
}

/// Column roles for importing an arbitrary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvMapping {
    pub user: String,
    pub item: String,
    /// Numeric feature columns.
    pub x_r: Vec<String>,
    /// Categorical feature columns, one-hot encoded after the numeric ones.
    pub x_r_categorical: Vec<String>,
    pub x_nr: String,
    /// Inferred from the column contents when unset.
    pub x_nr_kind: Option<BiasKind>,
    pub exposure: Option<String>,
    pub click: Option<String>,
    pub split: Split,
}

impl Default for CsvMapping {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "item_id".into(),
            x_r: Vec::new(),
            x_r_categorical: Vec::new(),
            x_nr: "x_nr".into(),
            x_nr_kind: None,
            exposure: Some("exposure".into()),
            click: Some("click".into()),
            split: Split::Eval,
        }
    }
}

/// Path of the JSON sidecar that accompanies a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".schema.json");
    PathBuf::from(name)
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Writes the dataset as CSV (`user_id, item_id, <features>, x_nr,
/// exposure, click`) plus its schema sidecar. Reals are written in
/// shortest round-trip form.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["user_id".to_string(), "item_id".to_string()];
    header.extend(dataset.feature_names().iter().cloned());
    header.extend(["x_nr", "exposure", "click"].map(String::from));
    w.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![r.user_id.clone(), r.item_id.clone()];
        row.extend(r.x_r.iter().map(|v| v.to_string()));
        row.push(match &r.x_nr {
            BiasValue::Real(v) => v.to_string(),
            BiasValue::Label(l) => l.clone(),
        });
        row.push(r.exposure.to_string());
        row.push(r.click.to_string());
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)?;
    write_json(
        &sidecar_path(path),
        &DatasetSchema {
            format_version: SCHEMA_VERSION,
            split: dataset.split(),
            x_nr_kind: dataset.x_nr_kind(),
            feature_names: dataset.feature_names().to_vec(),
            n_rows: dataset.len(),
        },
    )
}

/// Loads a dataset written by [`save_csv`], using its sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let schema: DatasetSchema = read_json(&sidecar_path(path))?;
    let mapping = CsvMapping {
        x_r: schema.feature_names.clone(),
        x_nr_kind: Some(schema.x_nr_kind),
        split: schema.split,
        ..Default::default()
    };
    load_csv(path, &mapping)
}

fn parse_binary(value: &str, column: &str, row: usize) -> Result<u8> {
    match value.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::NonNumericFeature {
            column: column.to_string(),
            row,
            value: other.to_string(),
        }),
    }
}

/// Imports a CSV with a header row according to `mapping`.
pub fn load_csv(path: &Path, mapping: &CsvMapping) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let user = col(&mapping.user)?;
    let item = col(&mapping.item)?;
    let numeric = mapping.x_r.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let categorical = mapping
        .x_r_categorical
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let x_nr = col(&mapping.x_nr)?;
    let exposure = match &mapping.exposure {
        Some(name) => match col(name) {
            Ok(i) => Some(i),
            Err(_) => {
                log::warn!("{}: no `{name}` column; every row treated as exposed", path.display());
                None
            }
        },
        None => None,
    };
    let click = match &mapping.click {
        Some(name) => Some(col(name)?),
        None => None,
    };

    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // Stable one-hot vocabulary: sorted labels per categorical column.
    let vocab: Vec<Vec<String>> = categorical
        .iter()
        .map(|&c| {
            rows.iter()
                .map(|r| r[c].to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect();
    let kind = mapping.x_nr_kind.unwrap_or_else(|| {
        if rows.iter().all(|r| r[x_nr].trim().parse::<f64>().is_ok()) {
            BiasKind::Continuous
        } else {
            BiasKind::Categorical
        }
    });

    let mut records = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let mut x = Vec::with_capacity(numeric.len());
        for (&c, name) in numeric.iter().zip(&mapping.x_r) {
            let v = r[c].trim();
            x.push(v.parse::<f64>().map_err(|_| Error::NonNumericFeature {
                column: name.clone(),
                row: i,
                value: v.to_string(),
            })?);
        }
        for (&c, labels) in categorical.iter().zip(&vocab) {
            x.extend(labels.iter().map(|l| f64::from(u8::from(l == &r[c]))));
        }
        let x_nr_value = match kind {
            BiasKind::Continuous => {
                let v = r[x_nr].trim();
                BiasValue::Real(v.parse().map_err(|_| Error::NonNumericFeature {
                    column: mapping.x_nr.clone(),
                    row: i,
                    value: v.to_string(),
                })?)
            }
            BiasKind::Categorical => BiasValue::Label(r[x_nr].to_string()),
        };
        let e = match exposure {
            Some(c) => parse_binary(&r[c], "exposure", i)?,
            None => 1,
        };
        let c = match click {
            Some(c) => parse_binary(&r[c], "click", i)?,
            None => 0,
        };
        records.push(InteractionRecord::new(&r[user], &r[item], x, x_nr_value, e, c));
    }
    let mut names = mapping.x_r.clone();
    for (name, labels) in mapping.x_r_categorical.iter().zip(&vocab) {
        names.extend(labels.iter().map(|l| format!("{name}={l}")));
    }
    Dataset::new(records, mapping.split, kind)?.with_feature_names(names)
}
