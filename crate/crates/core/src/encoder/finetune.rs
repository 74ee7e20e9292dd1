use std::fmt;
use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{accumulate, to_channel_major, StageGrads};
use super::optim::{Adam, StageOptimizers};
use super::{Encoder, Head};
use crate::error::{Error, Result};
use crate::imagery::{Chip, DihedralTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub head_epochs: usize,
    pub head_lr: f64,
    pub base_lr_top: f64,
    pub base_lr_bottom: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Cap on phase-2 epochs.
    pub max_epochs: usize,
    /// Random dihedral transforms on the training split.
    pub augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            head_epochs: 5,
            head_lr: 2e-3,
            base_lr_top: 1e-3,
            base_lr_bottom: 1e-5,
            batch_size: 32,
            patience: 2,
            train_fraction: 0.8,
            seed: 0,
            max_epochs: 50,
            augment: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("finetune config: {m}")));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(self.head_lr > 0.0 && self.base_lr_top > 0.0 && self.base_lr_bottom > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.base_lr_bottom > self.base_lr_top {
            return bad("base_lr_bottom exceeds base_lr_top");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Learning rate of stage `g` out of `n_stages`; `g == n_stages` is the head.
    pub fn stage_lr(&self, g: usize, n_stages: usize) -> f64 {
        let ratio = self.base_lr_top / self.base_lr_bottom;
        self.base_lr_bottom * ratio.powf(g as f64 / n_stages as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Head,
    Full,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Head => "head",
            Phase::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_top: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    /// Index into `records` of the restored checkpoint.
    pub best_index: Option<usize>,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_index.map(|i| &self.records[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopSignal {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            StopSignal::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

struct Sample {
    pixels: ndarray::Array3<f32>,
    label: f64,
}

struct Optimizers {
    stages: StageOptimizers,
    head_w: Adam,
    head_b: Adam,
}

impl Optimizers {
    fn new(enc: &Encoder) -> Self {
        Optimizers {
            stages: StageOptimizers::new(enc),
            head_w: Adam::new(enc.repr_dim()),
            head_b: Adam::new(1),
        }
    }
}

pub(crate) struct BatchGradients {
    pub loss: f64,
    pub head_w: Array1<f64>,
    pub head_b: f64,
    pub stages: Vec<Option<StageGrads>>,
}

/// Mean squared error of the linear head over a batch and its gradients.
/// Stages before `first_trainable` receive no gradient.
pub(crate) fn batch_gradients(
    enc: &Encoder,
    inputs: &[(Array2<f64>, usize)],
    labels: &[f64],
    first_trainable: usize,
) -> Result<BatchGradients> {
    let (w, b) = enc.linear_head().ok_or(Error::NotLinearHead)?;
    let n = inputs.len() as f64;
    let mut out = BatchGradients {
        loss: 0.0,
        head_w: Array1::zeros(w.len()),
        head_b: 0.0,
        stages: vec![None; enc.n_stages()],
    };
    for ((x, side), &y) in inputs.iter().zip(labels) {
        let trace = enc.forward_trace(x, *side, None);
        let err = w.dot(&trace.repr) + b - y;
        out.loss += err * err / n;
        let d_pred = 2.0 * err / n;
        out.head_w.scaled_add(d_pred, &trace.repr);
        out.head_b += d_pred;
        if first_trainable < enc.n_stages() {
            let d_repr = w * d_pred;
            accumulate(&mut out.stages, enc.backward_trace(&trace, &d_repr, first_trainable));
        }
    }
    Ok(out)
}

fn apply_step(enc: &mut Encoder, opt: &mut Optimizers, g: &BatchGradients, stage_lrs: &[f64], head_lr: f64) {
    opt.stages.step(enc, &g.stages, stage_lrs);
    if let Some(Head::Linear { weight, bias }) = &mut enc.head {
        opt.head_w.step(weight, &g.head_w, head_lr);
        opt.head_b.step_scalar(bias, g.head_b, head_lr);
    }
}

fn validation_loss(enc: &Encoder, val: &[(Array2<f64>, usize, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, side, y) in val {
        let r = enc.forward_trace(x, *side, None).repr;
        let e = enc.head_output(&r)? - y;
        total += e * e;
    }
    Ok(total / val.len() as f64)
}

/// Attaches a fresh linear head and fine-tunes in two phases: the head alone,
/// then every stage with log-spaced learning rates, stopping early on the
/// validation loss. Returns the best checkpoint seen and the per-epoch log.
pub fn finetune(encoder: &Encoder, labelled: &[(Chip, f64)], cfg: &FinetuneConfig) -> Result<(Encoder, TrainingLog)> {
    cfg.validate()?;
    if labelled.is_empty() {
        return Err(Error::InvalidArgument("no labelled chips to fine-tune on".into()));
    }
    if labelled.len() < 2 {
        return Err(Error::InvalidArgument("fine-tuning needs at least two labelled chips".into()));
    }
    if labelled.len() < 2 * cfg.batch_size {
        tracing::warn!(
            n = labelled.len(),
            batch_size = cfg.batch_size,
            "fewer than two batches of labelled chips"
        );
    }
    if let Some((c, y)) = labelled.iter().find(|(_, y)| !(y.is_finite() && *y >= 0.0)) {
        return Err(Error::InvalidArgument(format!("label {y} for `{}` is not a non-negative number", c.tile_id)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    order.shuffle(&mut rng);
    let n = labelled.len();
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let mut train = Vec::with_capacity(n_train);
    for &i in &order[..n_train] {
        train.push(Sample {
            pixels: encoder.model_array(&labelled[i].0)?,
            label: labelled[i].1,
        });
    }
    let mut val = Vec::with_capacity(n - n_train);
    for &i in &order[n_train..] {
        let (x, side) = to_channel_major(encoder.model_array(&labelled[i].0)?.view());
        val.push((x, side, labelled[i].1));
    }

    let mut enc = encoder.clone();
    let mean_label = train.iter().map(|s| s.label).sum::<f64>() / train.len() as f64;
    enc.head = Some(Head::Linear {
        weight: Array1::zeros(enc.repr_dim()),
        bias: mean_label,
    });

    let mut log = TrainingLog {
        n_train: train.len(),
        n_val: val.len(),
        ..TrainingLog::default()
    };
    let mut best: Option<(f64, Encoder)> = None;
    let n_stages = enc.n_stages();

    let phases = [
        (Phase::Head, cfg.head_epochs, n_stages),
        (Phase::Full, cfg.max_epochs, 0),
    ];
    for (phase, epochs, first_trainable) in phases {
        let mut opt = Optimizers::new(&enc);
        let (stage_lrs, head_lr): (Vec<f64>, f64) = match phase {
            Phase::Head => (vec![0.0; n_stages], cfg.head_lr),
            Phase::Full => ((0..n_stages).map(|g| cfg.stage_lr(g, n_stages)).collect(), cfg.base_lr_top),
        };
        let mut stopper = EarlyStopping::new(cfg.patience);
        for epoch in 1..=epochs {
            let mut perm: Vec<usize> = (0..train.len()).collect();
            perm.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (b, chunk) in perm.chunks(cfg.batch_size).enumerate() {
                let inputs: Vec<(Array2<f64>, usize)> = chunk
                    .iter()
                    .map(|&i| {
                        let px = &train[i].pixels;
                        if cfg.augment {
                            to_channel_major(DihedralTransform::random(&mut rng).apply_array(px.view()).view())
                        } else {
                            to_channel_major(px.view())
                        }
                    })
                    .collect();
                let labels: Vec<f64> = chunk.iter().map(|&i| train[i].label).collect();
                let g = batch_gradients(&enc, &inputs, &labels, first_trainable)?;
                if !g.loss.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "{phase} phase, epoch {epoch}, batch {b}: training loss {}",
                        g.loss
                    )));
                }
                epoch_loss += g.loss * chunk.len() as f64;
                apply_step(&mut enc, &mut opt, &g, &stage_lrs, head_lr);
            }
            let train_loss = epoch_loss / train.len() as f64;
            let val_loss = validation_loss(&enc, &val)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "{phase} phase, epoch {epoch}: validation loss {val_loss}"
                )));
            }
            tracing::info!(%phase, epoch, train_loss, val_loss, "epoch finished");
            log.records.push(EpochRecord {
                epoch,
                phase,
                train_loss,
                val_loss,
                lr_top: head_lr,
            });
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, enc.clone()));
                log.best_index = Some(log.records.len() - 1);
            }
            if phase == Phase::Full && stopper.observe(val_loss) == StopSignal::Stop {
                break;
            }
        }
    }

    let mut out = match best {
        Some((_, e)) => e,
        None => enc,
    };
    out.refresh_fingerprint();
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderManifest, StageSpec};
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_two_stage() -> Encoder {
        let mut m = EncoderManifest::tiny(4);
        m.stages = vec![
            StageSpec { out_channels: 3, kernel: 3, stride: 2 },
            StageSpec { out_channels: 4, kernel: 3, stride: 1 },
        ];
        m.repr_dim = 4;
        let mut e = Encoder::random(m).unwrap();
        e.stages[0].shift.fill(0.2);
        e.stages[1].shift.fill(0.3);
        e.head = Some(Head::Linear {
            weight: Array1::from(vec![0.5, -0.3, 0.8, 0.1]),
            bias: 0.2,
        });
        e
    }

    #[test]
    fn head_and_stage_gradients_match_finite_differences() {
        let enc = tiny_two_stage();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let side = 8;
        let inputs: Vec<(Array2<f64>, usize)> = (0..3)
            .map(|_| (Array2::from_shape_simple_fn((3, side * side), || rng.random::<f64>() * 2.0 - 1.0), side))
            .collect();
        let labels = [1.0, 0.0, 2.5];
        let g = batch_gradients(&enc, &inputs, &labels, 0).unwrap();
        let loss = |e: &Encoder| batch_gradients(e, &inputs, &labels, e.n_stages()).unwrap().loss;
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for k in 0..4 {
            let mut p = enc.clone();
            let mut m = enc.clone();
            if let (Some(Head::Linear { weight: wp, .. }), Some(Head::Linear { weight: wm, .. })) = (&mut p.head, &mut m.head) {
                wp[k] += h;
                wm[k] -= h;
            }
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(rel(fd, g.head_w[k]) < 1e-4, "head w{k}: {fd} vs {}", g.head_w[k]);
        }
        let mut p = enc.clone();
        let mut m = enc.clone();
        if let (Some(Head::Linear { bias: bp, .. }), Some(Head::Linear { bias: bm, .. })) = (&mut p.head, &mut m.head) {
            *bp += h;
            *bm -= h;
        }
        assert!(rel((loss(&p) - loss(&m)) / (2.0 * h), g.head_b) < 1e-4);
        for (stage, idx) in [(0, (1, 4)), (1, (2, 7)), (0, (0, 0))] {
            let mut p = enc.clone();
            p.stages[stage].weight[idx] += h;
            let mut m = enc.clone();
            m.stages[stage].weight[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = g.stages[stage].as_ref().unwrap().weight[idx];
            assert!((fd - an).abs() < 1e-6 + 1e-4 * fd.abs(), "stage {stage} {idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn frozen_stages_get_no_gradient() {
        let enc = tiny_two_stage();
        let x = (Array2::from_elem((3, 64), 0.5), 8);
        let g = batch_gradients(&enc, &[x], &[1.0], 1).unwrap();
        assert!(g.stages[0].is_none());
        assert!(g.stages[1].is_some());
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(2);
        let losses = [5.0, 4.0, 4.0, 4.5, 3.0];
        let signals: Vec<StopSignal> = losses.iter().map(|&l| s.observe(l)).collect();
        assert_eq!(
            signals[..4],
            [StopSignal::Improved, StopSignal::Improved, StopSignal::Continue, StopSignal::Stop]
        );
    }

    #[test]
    fn stage_rates_are_log_spaced() {
        let cfg = FinetuneConfig::default();
        assert!((cfg.stage_lr(0, 4) - 1e-5).abs() < 1e-18);
        assert!((cfg.stage_lr(4, 4) - 1e-3).abs() < 1e-15);
        assert!((cfg.stage_lr(2, 4) - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn config_validation() {
        let ok = FinetuneConfig::default();
        assert!(ok.validate().is_ok());
        assert!(FinetuneConfig { train_fraction: 1.0, ..ok.clone() }.validate().is_err());
        assert!(FinetuneConfig { base_lr_bottom: 1e-2, ..ok.clone() }.validate().is_err());
        assert!(FinetuneConfig { head_lr: 0.0, ..ok }.validate().is_err());
    }

    fn noise_chip(id: usize, rng: &mut ChaCha8Rng) -> Chip {
        Chip::new(format!("c{id}"), Array3::from_shape_simple_fn((200, 200, 3), || rng.random::<u8>())).unwrap()
    }

    #[test]
    fn constant_labels_fit_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<(Chip, f64)> = (0..10).map(|i| (noise_chip(i, &mut rng), 7.0)).collect();
        let cfg = FinetuneConfig {
            batch_size: 4,
            max_epochs: 1,
            head_epochs: 2,
            ..FinetuneConfig::default()
        };
        let enc = Encoder::random(EncoderManifest::tiny(0)).unwrap();
        let (tuned, log) = finetune(&enc, &data, &cfg).unwrap();
        let phase1 = log.records.iter().filter(|r| r.phase == Phase::Head).last().unwrap();
        assert!(phase1.val_loss <= 1e-2, "{}", phase1.val_loss);
        assert!((tuned.linear_head().unwrap().1 - 7.0).abs() < 0.1);
        let best = log.best().unwrap().val_loss;
        assert!(log.records.iter().all(|r| best <= r.val_loss));
    }

    #[test]
    fn rejects_bad_input() {
        let enc = Encoder::random(EncoderManifest::tiny(0)).unwrap();
        let cfg = FinetuneConfig::default();
        assert!(finetune(&enc, &[], &cfg).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = vec![(noise_chip(0, &mut rng), 1.0), (noise_chip(1, &mut rng), -1.0)];
        assert!(finetune(&enc, &data, &cfg).is_err());
    }
}
