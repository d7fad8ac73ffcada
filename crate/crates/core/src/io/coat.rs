//! The Coat shopping dataset: 290 users by 300 items, a self-selected
//! (MNAR) training matrix and a uniformly sampled (MAR) test matrix.
//!
//! Layout of a distribution directory:
//!
//! ```text
//! train.ascii, test.ascii                  290 x 300 integer grids, 0 = unobserved
//! user_item_features/user_features.ascii   290 rows of binary user features
//! user_item_features/item_features.ascii   300 rows of binary item features
//! user_item_features/*_features_map.txt    one feature name per line (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baselines::{fit_nb_propensity, rating_histogram, PropensityModel};
use crate::data::{BiasKind, BiasValue, Dataset, InteractionRecord, Split};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng;

pub const N_USERS: usize = 290;
pub const N_ITEMS: usize = 300;
pub const RATING_LEVELS: usize = 5;
/// Ratings at or above this count as clicks.
pub const CLICK_THRESHOLD: u8 = 4;

#[derive(Debug, Clone)]
pub struct CoatData {
    /// MNAR ratings, split `train`.
    pub train: Dataset,
    /// MAR ratings, split `benchmark`.
    pub test: Dataset,
    /// Rating of each train / test record, in record order.
    pub train_ratings: Vec<u8>,
    pub test_ratings: Vec<u8>,
    pub propensity: PropensityModel,
}

fn read_grid(path: &Path, rows: usize, cols: usize) -> Result<Vec<Vec<i64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let grid: Vec<Vec<i64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<i64>().map_err(|_| Error::ShapeMismatch {
                        file: file.clone(),
                        expected: "integer cells".into(),
                        found: format!("`{tok}` on line {}", i + 1),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let widths: Vec<usize> = grid.iter().map(Vec::len).collect();
    if grid.len() != rows || widths.iter().any(|&w| w != cols) {
        let found_cols = widths.iter().copied().find(|&w| w != cols).unwrap_or(cols);
        return Err(Error::ShapeMismatch {
            file,
            expected: format!("{rows}x{cols}"),
            found: format!("{}x{found_cols}", grid.len()),
        });
    }
    Ok(grid)
}

fn feature_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("user_item_features");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_names(path: &Path, prefix: &str, n: usize) -> Vec<String> {
    let names: Vec<String> = fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    // Accept "name" or "index name".
                    let mut parts = l.splitn(2, char::is_whitespace);
                    let first = parts.next().unwrap_or_default();
                    match parts.next() {
                        Some(rest) if first.parse::<usize>().is_ok() => rest.trim().to_string(),
                        _ => l.to_string(),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    if names.len() == n {
        names.into_iter().map(|s| format!("{prefix}{s}")).collect()
    } else {
        (0..n).map(|j| format!("{prefix}f{j}")).collect()
    }
}

fn ratings(grid: &[Vec<i64>], file: &Path) -> Result<Vec<(usize, usize, u8)>> {
    let mut out = Vec::new();
    for (u, row) in grid.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if v == 0 {
                continue;
            }
            if !(1..=RATING_LEVELS as i64).contains(&v) {
                return Err(Error::RatingOutOfRange {
                    file: file.display().to_string(),
                    line: u + 1,
                    value: v,
                });
            }
            out.push((u, i, v as u8));
        }
    }
    Ok(out)
}

/// Loads a Coat distribution. `x_r` is the user features followed by the
/// item features, `click = rating >= 4`, exposure is 1 for every observed
/// cell and `x_nr` is the Naive Bayes propensity of the cell's rating.
pub fn load_coat(dir: &Path) -> Result<CoatData> {
    let train_path = dir.join("train.ascii");
    let test_path = dir.join("test.ascii");
    let train_grid = read_grid(&train_path, N_USERS, N_ITEMS)?;
    let test_grid = read_grid(&test_path, N_USERS, N_ITEMS)?;
    let fdir = feature_dir(dir);
    let user_feats = read_features(&fdir.join("user_features.ascii"), N_USERS)?;
    let item_feats = read_features(&fdir.join("item_features.ascii"), N_ITEMS)?;

    let train_cells = ratings(&train_grid, &train_path)?;
    let test_cells = ratings(&test_grid, &test_path)?;
    let mnar = rating_histogram(train_cells.iter().map(|c| c.2), RATING_LEVELS);
    let mar = rating_histogram(test_cells.iter().map(|c| c.2), RATING_LEVELS);
    let observed = train_cells.len() as f64 / (N_USERS * N_ITEMS) as f64;
    let propensity = fit_nb_propensity(&mnar, &mar, observed)?;

    let mut names = read_names(
        &fdir.join("user_features_map.txt"),
        "user:",
        user_feats[0].len(),
    );
    names.extend(read_names(
        &fdir.join("item_features_map.txt"),
        "item:",
        item_feats[0].len(),
    ));
    let build = |cells: &[(usize, usize, u8)], split: Split| -> Result<(Dataset, Vec<u8>)> {
        let records = cells
            .iter()
            .map(|&(u, i, r)| {
                let mut x = user_feats[u].clone();
                x.extend_from_slice(&item_feats[i]);
                let p = propensity.propensity(r).expect("rating in range");
                InteractionRecord::new(
                    format!("u{u}"),
                    format!("i{i}"),
                    x,
                    BiasValue::Real(p),
                    1,
                    u8::from(r >= CLICK_THRESHOLD),
                )
            })
            .collect();
        let d = Dataset::new(records, split, BiasKind::Continuous)?.with_feature_names(names.clone())?;
        Ok((d, cells.iter().map(|c| c.2).collect()))
    };
    let (train, train_ratings) = build(&train_cells, Split::Train)?;
    let (test, test_ratings) = build(&test_cells, Split::Benchmark)?;
    Ok(CoatData {
        train,
        test,
        train_ratings,
        test_ratings,
        propensity,
    })
}

fn read_features(path: &Path, rows: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let feats: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::ShapeMismatch {
                        file: path.display().to_string(),
                        expected: "numeric features".into(),
                        found: t.to_string(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let width = feats.first().map_or(0, Vec::len);
    if feats.len() != rows || width == 0 || feats.iter().any(|r| r.len() != width) {
        return Err(Error::ShapeMismatch {
            file: path.display().to_string(),
            expected: format!("{rows} rows of equal width"),
            found: format!("{} rows", feats.len()),
        });
    }
    Ok(feats)
}

/// One-hot groups of the user features (gender, age, location, fashion
/// interest) and item features (gender, jacket type, colour, on front page).
const USER_GROUPS: [(&str, usize); 4] = [("gender", 2), ("age", 6), ("location", 3), ("fashion", 3)];
const ITEM_GROUPS: [(&str, usize); 4] = [("gender", 2), ("type", 16), ("color", 13), ("frontpage", 2)];
const TRAIN_PER_USER: usize = 24;
const TEST_PER_USER: usize = 16;

fn one_hot_rows(n: usize, groups: &[(&str, usize)], rng: &mut impl Rng) -> (Vec<Vec<usize>>, Vec<String>) {
    let mut names = Vec::new();
    for (g, k) in groups {
        names.extend((0..*k).map(|j| format!("{g}_{j}")));
    }
    let rows = (0..n)
        .map(|_| groups.iter().map(|(_, k)| rng.random_range(0..*k)).collect())
        .collect();
    (rows, names)
}

fn encode(choice: &[usize], groups: &[(&str, usize)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (c, (_, k)) in choice.iter().zip(groups) {
        out.extend((0..*k).map(|j| u8::from(j == *c)));
    }
    out
}

/// Writes a synthetic stand-in with the exact Coat layout and sizes (6960
/// self-selected train ratings, 4640 uniformly sampled test ratings).
///
/// Preferences come from user-group by item-group affinities plus item
/// popularity and noise, cut into five rating levels. Each user selects
/// its train items with probability increasing in the rating it would give
/// and in item popularity; test items are uniform over the rest.
pub fn write_surrogate(dir: &Path, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "coat-surrogate");
    let (users, user_names) = one_hot_rows(N_USERS, &USER_GROUPS, &mut rng);
    let (items, item_names) = one_hot_rows(N_ITEMS, &ITEM_GROUPS, &mut rng);
    let normal = |sd: f64, rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    };
    // Affinity between each (user group level, item group level) pair.
    let u_levels: usize = USER_GROUPS.iter().map(|g| g.1).sum();
    let i_levels: usize = ITEM_GROUPS.iter().map(|g| g.1).sum();
    let affinity: Vec<f64> = (0..u_levels * i_levels).map(|_| normal(0.35, &mut rng)).collect();
    let popularity: Vec<f64> = (0..N_ITEMS).map(|_| normal(0.6, &mut rng)).collect();
    let user_bias: Vec<f64> = (0..N_USERS).map(|_| normal(0.3, &mut rng)).collect();
    let offsets = |groups: &[(&str, usize)], choice: &[usize]| -> Vec<usize> {
        let mut base = 0;
        groups
            .iter()
            .zip(choice)
            .map(|((_, k), c)| {
                let idx = base + c;
                base += k;
                idx
            })
            .collect()
    };
    let mut pref = vec![vec![0.0; N_ITEMS]; N_USERS];
    for (u, uc) in users.iter().enumerate() {
        let ul = offsets(&USER_GROUPS, uc);
        for (i, ic) in items.iter().enumerate() {
            let il = offsets(&ITEM_GROUPS, ic);
            let mut s = popularity[i] + user_bias[u];
            for &a in &ul {
                for &b in &il {
                    s += affinity[a * i_levels + b];
                }
            }
            pref[u][i] = s + normal(0.8, &mut rng);
        }
    }
    // Rating cut points at fixed quantiles of the preference scores.
    let mut all: Vec<f64> = pref.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = [0.30, 0.55, 0.77, 0.91]
        .iter()
        .map(|q| all[(q * all.len() as f64) as usize])
        .collect();
    let rating = |s: f64| 1 + cuts.iter().filter(|&&c| s > c).count() as i64;

    let mut train = vec![vec![0i64; N_ITEMS]; N_USERS];
    let mut test = vec![vec![0i64; N_ITEMS]; N_USERS];
    for u in 0..N_USERS {
        // Weighted sampling without replacement via exponential keys.
        let mut keys: Vec<(f64, usize)> = (0..N_ITEMS)
            .map(|i| {
                let r = rating(pref[u][i]) as f64;
                let w = (0.9 * r + 0.8 * popularity[i]).exp();
                let e: f64 = -rng.random::<f64>().ln();
                (e / w, i)
            })
            .collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(_, i) in keys.iter().take(TRAIN_PER_USER) {
            train[u][i] = rating(pref[u][i]);
        }
        let rest: Vec<usize> = keys.iter().skip(TRAIN_PER_USER).map(|k| k.1).collect();
        for j in sample(&mut rng, rest.len(), TEST_PER_USER) {
            let i = rest[j];
            test[u][i] = rating(pref[u][i]);
        }
    }

    let grid_text = |g: &[Vec<i64>]| -> String {
        g.iter()
            .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect()
    };
    let feat_text = |rows: &[Vec<usize>], groups: &[(&str, usize)]| -> String {
        rows.iter()
            .map(|c| {
                encode(c, groups)
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
                    + "\n"
            })
            .collect()
    };
    let names_text = |names: &[String]| -> String {
        names
            .iter()
            .enumerate()
            .map(|(j, n)| format!("{j} {n}\n"))
            .collect()
    };
    let fdir = dir.join("user_item_features");
    write_atomic(&dir.join("train.ascii"), grid_text(&train).as_bytes())?;
    write_atomic(&dir.join("test.ascii"), grid_text(&test).as_bytes())?;
    write_atomic(&fdir.join("user_features.ascii"), feat_text(&users, &USER_GROUPS).as_bytes())?;
    write_atomic(&fdir.join("item_features.ascii"), feat_text(&items, &ITEM_GROUPS).as_bytes())?;
    write_atomic(&fdir.join("user_features_map.txt"), names_text(&user_names).as_bytes())?;
    write_atomic(&fdir.join("item_features_map.txt"), names_text(&item_names).as_bytes())?;
    Ok(())
}
