use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::StageSpec;
use crate::error::{Error, Result};
use crate::imagery::NormalizationStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretraining {
    Supervised,
    Swav,
    Deepcluster,
    BarlowTwins,
    Scratch,
}

fn default_architecture() -> String {
    "resnet50-style, 49 convolutional layers + global average pooling".to_string()
}

/// JSON sidecar describing an encoder checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderManifest {
    #[serde(default = "default_architecture")]
    pub architecture: String,
    /// Stage geometry, input to output. The last stage's channel count is the
    /// representation size.
    pub stages: Vec<StageSpec>,
    pub repr_dim: usize,
    pub pretraining: Pretraining,
    #[serde(default)]
    pub normalization_stats: NormalizationStats,
    /// Weights blob, relative to the manifest's directory when not absolute.
    /// Absent for `scratch`.
    #[serde(default)]
    pub weights_uri: Option<PathBuf>,
    /// SHA-256 of the weights blob; checked on load when present.
    #[serde(default)]
    pub fingerprint: Option<String>,
    /// Seed for random initialization of scratch encoders and fresh heads.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub training_log: Option<PathBuf>,
}

impl EncoderManifest {
    /// A small scratch encoder for 224x224 inputs: an 8x8 patch embedding
    /// followed by two 3x3 stages, ending at a 14x14 map.
    pub fn tiny(seed: u64) -> Self {
        let stages = vec![
            StageSpec { out_channels: 8, kernel: 8, stride: 8 },
            StageSpec { out_channels: 16, kernel: 3, stride: 2 },
            StageSpec { out_channels: 24, kernel: 3, stride: 1 },
        ];
        EncoderManifest {
            architecture: "tiny convnet, 3 stages + global average pooling".to_string(),
            repr_dim: 24,
            stages,
            pretraining: Pretraining::Scratch,
            normalization_stats: NormalizationStats::default(),
            weights_uri: None,
            fingerprint: None,
            init_seed: seed,
            training_log: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("encoder manifest: {m}")));
        if self.repr_dim == 0 {
            return bad("repr_dim must be positive".into());
        }
        let Some(last) = self.stages.last() else {
            return bad("at least one stage is required".into());
        };
        if last.out_channels != self.repr_dim {
            return bad(format!(
                "repr_dim {} does not match last stage width {}",
                self.repr_dim, last.out_channels
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return bad(format!("stage {i} has a zero dimension"));
            }
        }
        if self.pretraining != Pretraining::Scratch && self.weights_uri.is_none() {
            return bad("pretrained encoders need weights_uri".into());
        }
        self.normalization_stats.validate()
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut m: EncoderManifest = serde_json::from_reader(BufReader::new(file))?;
        if let (Some(uri), Some(dir)) = (&m.weights_uri, path.parent()) {
            if uri.is_relative() {
                m.weights_uri = Some(dir.join(uri));
            }
        }
        Ok(m)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }
}
