//! Brute-force k-nearest-neighbour tables with randomized tie-breaking.

use crate::rng::mix64;

/// `k` nearest neighbours of every row, flattened row-major.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    pub k: usize,
    /// Neighbour indices; row `i` owns `idx[i * k .. i * k + len[i]]`.
    pub idx: Vec<u32>,
    /// Number of valid neighbours per row (less than `k` only when fewer
    /// distinct source records exist).
    pub len: Vec<u32>,
}

impl NeighborTable {
    pub fn neighbors(&self, row: usize) -> &[u32] {
        let start = row * self.k;
        &self.idx[start..start + self.len[row] as usize]
    }
}

/// Euclidean kNN over `features` (`n x dim`, row-major).
///
/// Rows sharing a `key` with the query (the query itself and any resampled
/// copies of the same source record) are never neighbours. Distance ties
/// are broken by a hash of `(seed, query, candidate)` so that large groups
/// of identical feature vectors do not all resolve to the same few rows.
pub fn knn_table(features: &[f64], dim: usize, keys: &[u64], k: usize, seed: u64) -> NeighborTable {
    let n = keys.len();
    debug_assert_eq!(features.len(), n * dim);
    // Column-major copy so the distance loop runs over contiguous memory.
    let mut cols = vec![0.0; n * dim];
    for (i, row) in features.chunks_exact(dim.max(1)).enumerate().take(n) {
        for (c, &v) in row.iter().enumerate() {
            cols[c * n + i] = v;
        }
    }
    let mut idx = vec![0u32; n * k];
    let mut len = vec![0u32; n];
    let mut dist = vec![0.0f64; n];
    // (distance, tie, index), kept sorted ascending.
    let mut best: Vec<(f64, u64, u32)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        if dim == 0 {
            dist.fill(0.0);
        }
        for c in 0..dim {
            let q = features[i * dim + c];
            let col = &cols[c * n..(c + 1) * n];
            if c == 0 {
                for (d, &v) in dist.iter_mut().zip(col) {
                    *d = (v - q) * (v - q);
                }
            } else {
                for (d, &v) in dist.iter_mut().zip(col) {
                    let t = v - q;
                    *d += t * t;
                }
            }
        }
        best.clear();
        let mut worst = f64::INFINITY;
        let qseed = mix64(seed ^ (i as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        for (j, &d) in dist.iter().enumerate() {
            if d > worst || keys[j] == keys[i] {
                continue;
            }
            let tie = mix64(qseed ^ j as u64);
            if best.len() == k {
                if d == worst && tie >= best[k - 1].1 {
                    continue;
                }
                insert_sorted(&mut best, (d, tie, j as u32));
                best.pop();
            } else {
                insert_sorted(&mut best, (d, tie, j as u32));
            }
            if best.len() == k {
                worst = best[k - 1].0;
            }
        }
        len[i] = best.len() as u32;
        for (slot, &(_, _, j)) in idx[i * k..].iter_mut().zip(best.iter()) {
            *slot = j;
        }
    }
    NeighborTable { k, idx, len }
}

fn insert_sorted(best: &mut Vec<(f64, u64, u32)>, item: (f64, u64, u32)) {
    let pos = best.partition_point(|b| (b.0, b.1) < (item.0, item.1));
    best.insert(pos, item);
}
