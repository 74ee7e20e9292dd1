//! Self-supervised objectives at desk scale: the Barlow Twins
//! redundancy-reduction loss with its view generator, and the DeepCluster
//! cluster-then-relabel loop.

mod barlow;
mod cluster;
mod views;

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use barlow::{barlow_loss, barlow_loss_grad, BarlowConfig, BarlowOutput, BarlowTrainer};
pub use cluster::{deepcluster_epoch, kmeans, kmeans_pp, ClusterState, DeepClusterConfig, DeepClusterEpoch, KMeans};
pub use views::{augment, make_views, Augmentation};

/// One row of the pretext training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Cluster sizes separated by `;`, empty for Barlow Twins.
    pub cluster_sizes: String,
}

pub fn write_pretext_log(path: &Path, records: &[PretextRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
