//! Shared fixtures for the criterion benchmarks.

use popgrid_core::evalx::{PredictionEntry, PredictionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` rows of `d` uniform features with a noisy linear target.
pub fn regression_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let y = x
        .iter()
        .map(|r| 10.0 * r[0] + 5.0 * r.get(1).copied().unwrap_or(0.0) + rng.random::<f64>())
        .collect();
    (x, y)
}

/// Random prediction set over `regions` regions.
pub fn prediction_set(n: usize, regions: usize, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PredictionSet::new(
        (0..n)
            .map(|i| PredictionEntry {
                tile_id: format!("t{i}"),
                y: rng.random_range(0.0..50.0),
                y_hat: rng.random_range(0.0..50.0),
                region_key: format!("r{}", i % regions),
                fold: None,
            })
            .collect(),
    )
    .expect("valid entries")
}
