//! Shared fixtures for the benchmarks.

use cmidebias_core::synthetic::{self, SyntheticConfig};
use cmidebias_core::Dataset;

/// Biased synthetic data with roughly `n_users * 100 * 0.37` rows.
pub fn biased_data(n_users: usize, seed: u64) -> Dataset {
    synthetic::generate(&SyntheticConfig {
        n_users,
        n_items: 100,
        bias_strength: 4.0,
        seed,
        ..Default::default()
    })
    .expect("valid synthetic config")
    .mnar
}
