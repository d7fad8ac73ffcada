//! Exact conditional mutual information of finite contingency tables.

use crate::error::{Error, Result};

/// Counts over `(x bucket, a, c)` with finite supports.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    n_x: usize,
    n_a: usize,
    n_c: usize,
    counts: Vec<f64>,
}

impl ContingencyTable {
    pub fn new(n_x: usize, n_a: usize, n_c: usize) -> Self {
        Self {
            n_x,
            n_a,
            n_c,
            counts: vec![0.0; n_x * n_a * n_c],
        }
    }

    /// Binary `a` and `c` from a nested `[x][a][c]` array.
    pub fn from_binary(counts: &[[[f64; 2]; 2]]) -> Self {
        let mut t = Self::new(counts.len(), 2, 2);
        for (x, block) in counts.iter().enumerate() {
            for a in 0..2 {
                for c in 0..2 {
                    t.add(x, a, c, block[a][c]);
                }
            }
        }
        t
    }

    pub fn add(&mut self, x: usize, a: usize, c: usize, weight: f64) {
        let i = (x * self.n_a + a) * self.n_c + c;
        self.counts[i] += weight;
    }

    pub fn get(&self, x: usize, a: usize, c: usize) -> f64 {
        self.counts[(x * self.n_a + a) * self.n_c + c]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// `I(A; C | X)` in nats from normalized counts, with `0 log 0 = 0`.
pub fn plugin_cmi_discrete(table: &ContingencyTable) -> Result<f64> {
    if table.counts.iter().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(Error::InvalidConfig("counts must be finite and non-negative".into()));
    }
    let total = table.total();
    if total <= 0.0 {
        return Err(Error::EmptyCounts);
    }
    let mut cmi = 0.0;
    for x in 0..table.n_x {
        let mut n_xa = vec![0.0; table.n_a];
        let mut n_xc = vec![0.0; table.n_c];
        let mut n_x = 0.0;
        for a in 0..table.n_a {
            for c in 0..table.n_c {
                let n = table.get(x, a, c);
                n_xa[a] += n;
                n_xc[c] += n;
                n_x += n;
            }
        }
        if n_x == 0.0 {
            continue;
        }
        for a in 0..table.n_a {
            for c in 0..table.n_c {
                let n = table.get(x, a, c);
                if n > 0.0 {
                    // p(a,c|x) / (p(a|x) p(c|x)) = n * n_x / (n_xa * n_xc)
                    cmi += (n / total) * (n * n_x / (n_xa[a] * n_xc[c])).ln();
                }
            }
        }
    }
    // Rounding can leave a tiny negative residue on independent tables.
    Ok(cmi.max(0.0))
}
