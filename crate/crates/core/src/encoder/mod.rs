//! Convolutional encoder: global-average-pooled representations, a linear
//! regression head, head-first then discriminative fine-tuning, and Monte Carlo
//! dropout inference.

mod finetune;
mod manifest;
mod mc_dropout;
pub(crate) mod network;
pub(crate) mod optim;
pub mod weights;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{prepare_for_model, Chip};
use network::{to_channel_major, to_feature_map, ConvStage, StageCache, StageGrads};
use weights::NamedTensor;

pub use finetune::{
    finetune, EarlyStopping, EpochRecord, FinetuneConfig, Phase, StopSignal, TrainingLog,
};
pub use manifest::{EncoderManifest, Pretraining};
pub use mc_dropout::{predict_mc_dropout, McPrediction};
pub use network::StageSpec;

const INPUT_CHANNELS: usize = 3;

/// Output layer on top of the pooled representation.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Single-output linear regression.
    Linear { weight: Array1<f64>, bias: f64 },
    /// Multi-class logits, as used for pseudo-label training.
    Classifier { weight: Array2<f64>, bias: Array1<f64> },
}

/// Fixed-length vector emitted for one tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub tile_id: String,
    pub vector: Vec<f64>,
    pub encoder_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    manifest: EncoderManifest,
    pub(crate) stages: Vec<ConvStage>,
    pub(crate) head: Option<Head>,
    fingerprint: String,
}

/// Intermediate state of a training forward pass.
pub(crate) struct ForwardTrace {
    caches: Vec<StageCache>,
    pub(crate) last_side: usize,
    pub(crate) last_act: Array2<f64>,
    pub(crate) repr: Array1<f64>,
}

impl Encoder {
    /// Randomly initialized encoder (He-normal convolutions, identity
    /// normalization) seeded by `manifest.init_seed`.
    pub fn random(manifest: EncoderManifest) -> Result<Self> {
        manifest.validate_shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.init_seed);
        let mut in_ch = INPUT_CHANNELS;
        let mut stages = Vec::with_capacity(manifest.stages.len());
        for spec in &manifest.stages {
            stages.push(ConvStage::init(*spec, in_ch, &mut rng));
            in_ch = spec.out_channels;
        }
        let mut enc = Encoder {
            manifest,
            stages,
            head: None,
            fingerprint: String::new(),
        };
        enc.refresh_fingerprint();
        Ok(enc)
    }

    pub fn manifest(&self) -> &EncoderManifest {
        &self.manifest
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn repr_dim(&self) -> usize {
        self.manifest.repr_dim
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn head(&self) -> Option<&Head> {
        self.head.as_ref()
    }

    pub fn set_head(&mut self, head: Option<Head>) -> Result<()> {
        let d = self.repr_dim();
        let ok = match &head {
            None => true,
            Some(Head::Linear { weight, .. }) => weight.len() == d,
            Some(Head::Classifier { weight, bias }) => weight.ncols() == d && bias.len() == weight.nrows(),
        };
        if !ok {
            return Err(Error::Shape(format!("head does not match repr_dim {d}")));
        }
        self.head = head;
        self.refresh_fingerprint();
        Ok(())
    }

    /// Linear head weights and bias, if the head is a single-output regression.
    pub fn linear_head(&self) -> Option<(&Array1<f64>, f64)> {
        match &self.head {
            Some(Head::Linear { weight, bias }) => Some((weight, *bias)),
            _ => None,
        }
    }

    pub(crate) fn refresh_fingerprint(&mut self) {
        self.fingerprint = weights::fingerprint(&weights::encode(&self.to_tensors()));
    }

    /// Standardized `(row, col, band)` input for `chip`, prepared on demand.
    pub(crate) fn model_array(&self, chip: &Chip) -> Result<Array3<f32>> {
        let arr = match &chip.pixels_model {
            Some(m) => m.clone(),
            None => prepare_for_model(chip, &self.manifest.normalization_stats)?
                .pixels_model
                .expect("prepared chip has model pixels"),
        };
        let (h, w, c) = arr.dim();
        if h != w || c != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "model input for `{}` must be square and 3-band, got {:?}",
                chip.tile_id,
                arr.dim()
            )));
        }
        Ok(arr)
    }

    fn model_input(&self, chip: &Chip) -> Result<(Array2<f64>, usize)> {
        Ok(to_channel_major(self.model_array(chip)?.view()))
    }

    pub(crate) fn forward_trace(
        &self,
        input: &Array2<f64>,
        side: usize,
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> ForwardTrace {
        use rand::Rng;
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut act = input.clone();
        let mut side = side;
        for stage in &self.stages {
            let (out, cache) = match dropout.as_mut() {
                Some((rng, p)) => {
                    let mut draw = || rng.random::<f64>();
                    stage.forward(&act, side, Some((&mut draw, *p)))
                }
                None => stage.forward(&act, side, None),
            };
            side = stage.spec.output_side(side);
            act = out;
            caches.push(cache);
        }
        let repr = act.mean_axis(ndarray::Axis(1)).expect("non-empty map");
        ForwardTrace {
            caches,
            last_side: side,
            last_act: act,
            repr,
        }
    }

    /// Gradients for stages `first_trainable..`, given the gradient with
    /// respect to the pooled representation.
    pub(crate) fn backward_trace(
        &self,
        trace: &ForwardTrace,
        d_repr: &Array1<f64>,
        first_trainable: usize,
    ) -> Vec<Option<StageGrads>> {
        let n = self.stages.len();
        let mut grads: Vec<Option<StageGrads>> = vec![None; n];
        if first_trainable >= n {
            return grads;
        }
        let hw = (trace.last_side * trace.last_side) as f64;
        let mut d_act = Array2::from_shape_fn(trace.last_act.raw_dim(), |(c, _)| d_repr[c] / hw);
        for i in (first_trainable..n).rev() {
            let (g, d_in) = self.stages[i].backward(&trace.caches[i], &d_act, i > first_trainable);
            grads[i] = Some(g);
            match d_in {
                Some(d) => d_act = d,
                None => break,
            }
        }
        grads
    }

    /// Global-average-pooled representation in inference mode.
    pub fn represent(&self, chip: &Chip) -> Result<Array1<f64>> {
        let (x, side) = self.model_input(chip)?;
        Ok(self.forward_trace(&x, side, None).repr)
    }

    /// Final feature map `(channels, h, w)` and its pooled representation.
    pub fn feature_map(&self, chip: &Chip) -> Result<(Array3<f64>, Array1<f64>)> {
        let (x, side) = self.model_input(chip)?;
        let t = self.forward_trace(&x, side, None);
        Ok((to_feature_map(&t.last_act, t.last_side), t.repr))
    }

    /// Head output before clamping.
    pub fn head_output(&self, repr: &Array1<f64>) -> Result<f64> {
        let (w, b) = self.linear_head().ok_or(Error::NotLinearHead)?;
        Ok(w.dot(repr) + b)
    }

    /// Population predictions from the regression head, clamped at zero.
    pub fn predict(&self, chips: &[Chip]) -> Result<Vec<f64>> {
        self.linear_head().ok_or(Error::NotLinearHead)?;
        chips
            .par_iter()
            .map(|c| Ok(self.head_output(&self.represent(c)?)?.max(0.0)))
            .collect()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("stage{i}.weight"),
                shape: s.weight.shape().to_vec(),
                data: s.weight.iter().copied().collect(),
            });
            for (suffix, v) in [("bias", &s.bias), ("scale", &s.scale), ("shift", &s.shift)] {
                out.push(NamedTensor {
                    name: format!("stage{i}.{suffix}"),
                    shape: vec![v.len()],
                    data: v.to_vec(),
                });
            }
        }
        match &self.head {
            Some(Head::Linear { weight, bias }) => {
                out.push(NamedTensor { name: "head.weight".into(), shape: vec![weight.len()], data: weight.to_vec() });
                out.push(NamedTensor { name: "head.bias".into(), shape: vec![1], data: vec![*bias] });
            }
            Some(Head::Classifier { weight, bias }) => {
                out.push(NamedTensor {
                    name: "head.weight".into(),
                    shape: weight.shape().to_vec(),
                    data: weight.iter().copied().collect(),
                });
                out.push(NamedTensor { name: "head.bias".into(), shape: vec![bias.len()], data: bias.to_vec() });
            }
            None => {}
        }
        out
    }

    /// Writes `<stem>.weights` and `<stem>.json` into `dir`; returns the written manifest.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<EncoderManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = weights::encode(&self.to_tensors());
        let wpath = dir.join(format!("{stem}.weights"));
        fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
        let mut manifest = self.manifest.clone();
        manifest.weights_uri = Some(format!("{stem}.weights").into());
        manifest.fingerprint = Some(weights::fingerprint(&bytes));
        manifest.write_json(&dir.join(format!("{stem}.json")))?;
        Ok(manifest)
    }
}

impl EncoderManifest {
    fn validate_shape(&self) -> Result<()> {
        let mut m = self.clone();
        m.pretraining = Pretraining::Scratch;
        m.validate()
    }
}

/// Builds an encoder from its manifest: random for `scratch` without weights,
/// otherwise from the weights blob, which must match the declared stages.
pub fn load_encoder(manifest: &EncoderManifest) -> Result<Encoder> {
    manifest.validate()?;
    let Some(uri) = &manifest.weights_uri else {
        return Encoder::random(manifest.clone());
    };
    let bytes = fs::read(uri).map_err(|e| Error::io(uri, e))?;
    let fp = weights::fingerprint(&bytes);
    if let Some(expected) = &manifest.fingerprint {
        if expected != &fp {
            return Err(Error::CorruptWeights(format!(
                "fingerprint {fp} does not match manifest {expected}"
            )));
        }
    }
    let tensors = weights::decode(&bytes)?;
    let mut enc = Encoder::random(manifest.clone())?;
    let mut it = tensors.into_iter();
    let mut take = |name: String, expected: Vec<usize>| -> Result<Vec<f64>> {
        let t = it.next().ok_or_else(|| Error::WeightsMismatch {
            layer: name.clone(),
            expected: expected.clone(),
            found: vec![],
        })?;
        if t.name != name || t.shape != expected {
            return Err(Error::WeightsMismatch {
                layer: name,
                expected,
                found: t.shape,
            });
        }
        Ok(t.data)
    };
    for (i, s) in enc.stages.iter_mut().enumerate() {
        let shape = s.weight.shape().to_vec();
        s.weight = Array2::from_shape_vec((shape[0], shape[1]), take(format!("stage{i}.weight"), shape)?)
            .expect("shape checked");
        let n = s.bias.len();
        s.bias = Array1::from(take(format!("stage{i}.bias"), vec![n])?);
        s.scale = Array1::from(take(format!("stage{i}.scale"), vec![n])?);
        s.shift = Array1::from(take(format!("stage{i}.shift"), vec![n])?);
    }
    let d = manifest.repr_dim;
    let rest: Vec<NamedTensor> = it.collect();
    enc.head = match rest.as_slice() {
        [] => None,
        [w, b] if w.name == "head.weight" && b.name == "head.bias" => match w.shape.as_slice() {
            [n] if *n == d && b.shape == [1] => Some(Head::Linear {
                weight: Array1::from(w.data.clone()),
                bias: b.data[0],
            }),
            [k, n] if *n == d && b.shape == [*k] => Some(Head::Classifier {
                weight: Array2::from_shape_vec((*k, d), w.data.clone()).expect("shape checked"),
                bias: Array1::from(b.data.clone()),
            }),
            _ => {
                return Err(Error::WeightsMismatch {
                    layer: "head.weight".into(),
                    expected: vec![d],
                    found: w.shape.clone(),
                })
            }
        },
        other => {
            return Err(Error::CorruptWeights(format!(
                "unexpected tensors after the last stage: {:?}",
                other.iter().map(|t| t.name.as_str()).collect::<Vec<_>>()
            )))
        }
    };
    enc.fingerprint = fp;
    Ok(enc)
}

/// Pooled representations for a batch of chips, in input order.
pub fn extract(encoder: &Encoder, chips: &[Chip]) -> Result<Vec<Representation>> {
    chips
        .par_iter()
        .map(|chip| {
            let v = encoder.represent(chip)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("non-finite representation for `{}`", chip.tile_id)));
            }
            Ok(Representation {
                tile_id: chip.tile_id.clone(),
                vector: v.to_vec(),
                encoder_fingerprint: encoder.fingerprint().to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn chip(seed: u8) -> Chip {
        Chip::new(
            format!("t{seed}"),
            Array3::from_shape_fn((200, 200, 3), |(i, j, c)| ((i * 7 + j * 13 + c * 29 + seed as usize * 31) % 256) as u8),
        )
        .unwrap()
    }

    #[test]
    fn scratch_encoder_is_seeded() {
        let a = load_encoder(&EncoderManifest::tiny(5)).unwrap();
        let b = load_encoder(&EncoderManifest::tiny(5)).unwrap();
        let c = load_encoder(&EncoderManifest::tiny(6)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn save_load_roundtrip_preserves_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = load_encoder(&EncoderManifest::tiny(1)).unwrap();
        enc.set_head(Some(Head::Linear { weight: Array1::from_elem(24, 0.1), bias: 3.0 })).unwrap();
        let manifest = enc.save(dir.path(), "ckpt").unwrap();
        let reread = EncoderManifest::read_json(&dir.path().join("ckpt.json")).unwrap();
        let back = load_encoder(&reread).unwrap();
        let again = load_encoder(&reread).unwrap();
        assert_eq!(back.fingerprint(), enc.fingerprint());
        assert_eq!(again.fingerprint(), back.fingerprint());
        assert_eq!(manifest.fingerprint.as_deref(), Some(enc.fingerprint()));
        assert_eq!(back.linear_head().unwrap().1, 3.0);
        let x = chip(1);
        assert_eq!(back.represent(&x).unwrap(), enc.represent(&x).unwrap());
    }

    #[test]
    fn corrupted_weights_fail_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let enc = load_encoder(&EncoderManifest::tiny(1)).unwrap();
        enc.save(dir.path(), "ckpt").unwrap();
        let wpath = dir.path().join("ckpt.weights");
        let mut bytes = fs::read(&wpath).unwrap();
        bytes.truncate(bytes.len() / 2);
        fs::write(&wpath, &bytes).unwrap();
        let mut m = EncoderManifest::read_json(&dir.path().join("ckpt.json")).unwrap();
        assert!(matches!(load_encoder(&m), Err(Error::CorruptWeights(_))));
        m.fingerprint = None;
        assert!(matches!(load_encoder(&m), Err(Error::CorruptWeights(_))));
    }

    #[test]
    fn architecture_mismatch_names_first_layer() {
        let dir = tempfile::tempdir().unwrap();
        let enc = load_encoder(&EncoderManifest::tiny(1)).unwrap();
        enc.save(dir.path(), "ckpt").unwrap();
        let mut m = EncoderManifest::read_json(&dir.path().join("ckpt.json")).unwrap();
        m.fingerprint = None;
        m.stages[1].out_channels = 12;
        match load_encoder(&m) {
            Err(Error::WeightsMismatch { layer, .. }) => assert_eq!(layer, "stage1.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extraction_is_deterministic_and_batch_invariant() {
        let enc = load_encoder(&EncoderManifest::tiny(2)).unwrap();
        let c = chip(3);
        let single = extract(&enc, std::slice::from_ref(&c)).unwrap();
        let mut batch: Vec<Chip> = (0..32).map(chip).collect();
        batch[17] = c.clone();
        batch[4] = c.clone();
        let many = extract(&enc, &batch).unwrap();
        assert_eq!(many[4].vector, many[17].vector);
        for (a, b) in single[0].vector.iter().zip(&many[17].vector) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(many.len(), 32);
        assert_eq!(many[17].tile_id, c.tile_id);
        assert_eq!(single[0].vector.len(), 24);
    }

    #[test]
    fn pooling_of_constant_feature_map() {
        // A 1x1 stage with zero weights and a per-channel bias yields a spatially
        // constant map; its pooled value is that constant (after ReLU).
        let mut m = EncoderManifest::tiny(0);
        m.stages = vec![StageSpec { out_channels: 4, kernel: 1, stride: 1 }];
        m.repr_dim = 4;
        let mut enc = Encoder::random(m).unwrap();
        enc.stages[0].weight.fill(0.0);
        enc.stages[0].bias = Array1::from(vec![0.5, 1.5, 2.0, -1.0]);
        let v = enc.represent(&chip(9)).unwrap();
        assert_eq!(v.to_vec(), vec![0.5, 1.5, 2.0, 0.0]);
    }
}
