use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Encoder;
use crate::error::{Error, Result};
use crate::evalx::stats::sample_std;
use crate::imagery::Chip;
use crate::seed::derive_seed;

/// Summary of the stochastic passes for one chip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub tile_id: String,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Predicts each chip `n_passes` times with dropout of rate `p` active after
/// every stage. Each chip draws from its own stream seeded by `(seed, tile_id)`.
pub fn predict_mc_dropout(
    encoder: &Encoder,
    chips: &[Chip],
    n_passes: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<McPrediction>> {
    if n_passes < 2 {
        return Err(Error::InvalidArgument(format!("n_passes must be at least 2, got {n_passes}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
    }
    encoder.linear_head().ok_or(Error::NotLinearHead)?;
    chips
        .par_iter()
        .map(|chip| {
            let (x, side) = encoder.model_input(chip)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &chip.tile_id));
            let mut preds = Vec::with_capacity(n_passes);
            for _ in 0..n_passes {
                let repr = if p > 0.0 {
                    encoder.forward_trace(&x, side, Some((&mut rng, p))).repr
                } else {
                    encoder.forward_trace(&x, side, None).repr
                };
                preds.push(encoder.head_output(&repr)?.max(0.0));
            }
            let mean = preds.iter().sum::<f64>() / preds.len() as f64;
            Ok(McPrediction {
                tile_id: chip.tile_id.clone(),
                mean,
                std: sample_std(&preds),
                min: preds.iter().copied().fold(f64::INFINITY, f64::min),
                max: preds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderManifest, Head};
    use ndarray::{Array1, Array3};

    fn encoder() -> Encoder {
        let mut e = Encoder::random(EncoderManifest::tiny(3)).unwrap();
        e.set_head(Some(Head::Linear { weight: Array1::from_elem(24, 1.0), bias: 1.0 })).unwrap();
        e
    }

    fn chip(id: &str, k: usize) -> Chip {
        Chip::new(id, Array3::from_shape_fn((200, 200, 3), |(i, j, c)| ((i * j + c * 50 + k) % 256) as u8)).unwrap()
    }

    #[test]
    fn zero_rate_has_zero_spread() {
        let out = predict_mc_dropout(&encoder(), &[chip("a", 0), chip("b", 9)], 5, 0.0, 1).unwrap();
        assert!(out.iter().all(|m| m.std == 0.0));
    }

    #[test]
    fn mean_lies_between_extremes() {
        let out = predict_mc_dropout(&encoder(), &[chip("a", 0), chip("b", 9)], 30, 0.1, 1).unwrap();
        for m in out {
            assert!(m.std > 0.0);
            assert!(m.min <= m.mean && m.mean <= m.max);
        }
    }

    #[test]
    fn duplicates_share_their_stream() {
        let c = chip("dup", 3);
        let out = predict_mc_dropout(&encoder(), &[c.clone(), chip("x", 1), c], 4, 0.1, 7).unwrap();
        assert_eq!(out[0], out[2]);
        let again = predict_mc_dropout(&encoder(), &[chip("dup", 3)], 4, 0.1, 7).unwrap();
        assert_eq!(again[0], out[0]);
    }

    #[test]
    fn argument_checks() {
        assert!(predict_mc_dropout(&encoder(), &[], 1, 0.1, 0).is_err());
        assert!(predict_mc_dropout(&encoder(), &[], 3, 1.0, 0).is_err());
    }
}
