use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::views::{make_views, Augmentation};
use crate::encoder::network::{accumulate, to_channel_major};
use crate::encoder::optim::StageOptimizers;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::imagery::Chip;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarlowConfig {
    pub lambda_offdiag: f64,
    /// Width of the embeddings fed to the loss; must equal the encoder's
    /// representation size.
    pub embed_dim: usize,
    pub batch_size: usize,
    pub view_augmentations: Vec<Augmentation>,
    pub lr: f64,
}

impl Default for BarlowConfig {
    fn default() -> Self {
        BarlowConfig {
            lambda_offdiag: 5e-3,
            embed_dim: 24,
            batch_size: 16,
            view_augmentations: Augmentation::ALL.to_vec(),
            lr: 1e-3,
        }
    }
}

impl BarlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_offdiag > 0.0) {
            return Err(Error::InvalidArgument("lambda_offdiag must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("Barlow batches need at least two samples".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss value and the cross-correlation matrix it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct BarlowOutput {
    pub loss: f64,
    pub c: Array2<f64>,
}

struct Standardized {
    z: Array2<f64>,
    std: Array1<f64>,
}

fn standardize_columns(x: ArrayView2<'_, f64>) -> Result<Standardized> {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &x - &mean;
    let std = centered.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|s| (s / n).sqrt());
    if let Some(d) = std.iter().position(|&s| !(s > 1e-12)) {
        return Err(Error::ZeroVariance(d));
    }
    Ok(Standardized { z: centered / &std, std })
}

fn check_shapes(z_a: ArrayView2<'_, f64>, z_b: ArrayView2<'_, f64>) -> Result<()> {
    if z_a.dim() != z_b.dim() {
        return Err(Error::Shape(format!("views differ in shape: {:?} vs {:?}", z_a.dim(), z_b.dim())));
    }
    if z_a.nrows() < 2 {
        return Err(Error::InvalidArgument("batch must hold at least two samples".into()));
    }
    Ok(())
}

fn loss_from_c(c: &Array2<f64>, lambda: f64) -> f64 {
    let mut loss = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        loss += if i == j { (1.0 - v).powi(2) } else { lambda * v * v };
    }
    loss
}

/// Redundancy-reduction loss between two batches of embeddings (rows are
/// samples). Columns are standardized over the batch with the population
/// standard deviation before correlating.
pub fn barlow_loss(z_a: ArrayView2<'_, f64>, z_b: ArrayView2<'_, f64>, lambda: f64) -> Result<BarlowOutput> {
    check_shapes(z_a, z_b)?;
    let a = standardize_columns(z_a)?;
    let b = standardize_columns(z_b)?;
    let c = a.z.t().dot(&b.z) / z_a.nrows() as f64;
    Ok(BarlowOutput { loss: loss_from_c(&c, lambda), c })
}

/// Loss and its gradients with respect to both raw embedding batches.
pub fn barlow_loss_grad(
    z_a: ArrayView2<'_, f64>,
    z_b: ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<(BarlowOutput, Array2<f64>, Array2<f64>)> {
    check_shapes(z_a, z_b)?;
    let n = z_a.nrows() as f64;
    let a = standardize_columns(z_a)?;
    let b = standardize_columns(z_b)?;
    let c = a.z.t().dot(&b.z) / n;
    let g = Array2::from_shape_fn(c.raw_dim(), |(i, j)| {
        if i == j {
            -2.0 * (1.0 - c[[i, j]])
        } else {
            2.0 * lambda * c[[i, j]]
        }
    });
    let d_a_hat = b.z.dot(&g.t()) / n;
    let d_b_hat = a.z.dot(&g) / n;
    let d_a = through_standardization(&a, &d_a_hat);
    let d_b = through_standardization(&b, &d_b_hat);
    Ok((BarlowOutput { loss: loss_from_c(&c, lambda), c }, d_a, d_b))
}

fn through_standardization(s: &Standardized, d_hat: &Array2<f64>) -> Array2<f64> {
    let mean_g = d_hat.mean_axis(Axis(0)).expect("non-empty batch");
    let mean_gz = (d_hat * &s.z).mean_axis(Axis(0)).expect("non-empty batch");
    (d_hat - &mean_g - &(&s.z * &mean_gz)) / &s.std
}

/// Stateful Barlow Twins trainer; keeps optimizer moments across epochs.
pub struct BarlowTrainer {
    encoder: Encoder,
    cfg: BarlowConfig,
    opt: StageOptimizers,
}

impl BarlowTrainer {
    pub fn new(encoder: Encoder, cfg: BarlowConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.embed_dim != encoder.repr_dim() {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} differs from the encoder's repr_dim {}",
                cfg.embed_dim,
                encoder.repr_dim()
            )));
        }
        let opt = StageOptimizers::new(&encoder);
        Ok(BarlowTrainer { encoder, cfg, opt })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn into_encoder(mut self) -> Encoder {
        self.encoder.refresh_fingerprint();
        self.encoder
    }

    /// One pass over `chips` in shuffled batches; returns the mean batch loss.
    /// Batches whose embeddings have a constant dimension are skipped.
    pub fn epoch(&mut self, chips: &[Chip], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..chips.len()).collect();
        order.shuffle(&mut rng);
        let stats = self.encoder.manifest().normalization_stats;
        let n_stages = self.encoder.n_stages();
        let lrs = vec![self.cfg.lr; n_stages];
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size).filter(|c| c.len() >= 2) {
            let views: Vec<(Chip, Chip)> = chunk
                .par_iter()
                .map(|&i| {
                    let c = &chips[i];
                    make_views(c, &self.cfg.view_augmentations, &stats, derive_seed(seed, &c.tile_id))
                })
                .collect::<Result<_>>()?;
            let enc = &self.encoder;
            let mut traces = Vec::with_capacity(2 * views.len());
            for (a, b) in &views {
                for v in [a, b] {
                    let (x, side) = to_channel_major(v.model_pixels()?.view());
                    traces.push(enc.forward_trace(&x, side, None));
                }
            }
            let d = enc.repr_dim();
            let za = Array2::from_shape_fn((views.len(), d), |(r, k)| traces[2 * r].repr[k]);
            let zb = Array2::from_shape_fn((views.len(), d), |(r, k)| traces[2 * r + 1].repr[k]);
            let (out, da, db) = match barlow_loss_grad(za.view(), zb.view(), self.cfg.lambda_offdiag) {
                Ok(r) => r,
                Err(Error::ZeroVariance(dim)) => {
                    tracing::warn!(dim, "skipping batch with a constant embedding dimension");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("Barlow loss {}", out.loss)));
            }
            let mut grads = vec![None; n_stages];
            for (r, pair) in traces.chunks(2).enumerate() {
                accumulate(&mut grads, enc.backward_trace(&pair[0], &da.row(r).to_owned(), 0));
                accumulate(&mut grads, enc.backward_trace(&pair[1], &db.row(r).to_owned(), 0));
            }
            self.opt.step(&mut self.encoder, &grads, &lrs);
            total += out.loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::InvalidArgument("no usable Barlow batch in this epoch".into()));
        }
        Ok(total / batches as f64)
    }
}
