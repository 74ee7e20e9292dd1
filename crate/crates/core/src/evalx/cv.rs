use std::collections::BTreeSet;

use super::metrics::{compute_metrics, MetricsReport, PredictionEntry, PredictionSet};
use crate::error::{Error, Result};
use crate::geogrid::{FoldSpec, Tile};

/// Anything that can be trained on labelled tiles and then predict others.
pub trait Pipeline {
    fn fit(&mut self, train: &[Tile]) -> Result<()>;
    fn predict(&self, tiles: &[Tile]) -> Result<Vec<f64>>;
}

/// Training and held-out tiles of fold `f`, refusing empty training sets and
/// any tile on both sides.
pub fn split_fold(tiles: &[Tile], folds: &FoldSpec, f: usize) -> Result<(Vec<Tile>, Vec<Tile>)> {
    let (val, train): (Vec<Tile>, Vec<Tile>) = tiles
        .iter()
        .cloned()
        .partition(|t| folds.fold_of(&t.tile_id) == Some(f));
    if train.is_empty() {
        return Err(Error::InvalidFolds(format!("fold {f} leaves no training tiles")));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|t| t.tile_id.as_str()).collect();
    if let Some(t) = val.iter().find(|t| train_ids.contains(t.tile_id.as_str())) {
        return Err(Error::Leakage(format!("tile `{}` is in both train and validation of fold {f}", t.tile_id)));
    }
    Ok((train, val))
}

/// Checks that every tile is labelled and the folds cover exactly these tiles.
pub fn check_cv_inputs(tiles: &[Tile], folds: &FoldSpec) -> Result<()> {
    if let Some(t) = tiles.iter().find(|t| t.label().is_none()) {
        return Err(Error::InvalidArgument(format!(
            "tile `{}` has no usable label for cross-validation",
            t.tile_id
        )));
    }
    folds.check_covers(tiles.iter().map(|t| t.tile_id.as_str()))
}

/// Trains on all folds but one, predicts the held-out fold, and scores the
/// pooled predictions once. Negative predictions are clamped to zero.
pub fn crossvalidate(
    pipeline: &mut dyn Pipeline,
    tiles: &[Tile],
    folds: &FoldSpec,
) -> Result<(PredictionSet, MetricsReport)> {
    check_cv_inputs(tiles, folds)?;
    let mut entries = Vec::with_capacity(tiles.len());
    for f in 0..folds.n_folds() {
        let (train, val) = split_fold(tiles, folds, f)?;
        if val.is_empty() {
            continue;
        }
        pipeline.fit(&train)?;
        let preds = pipeline.predict(&val)?;
        if preds.len() != val.len() {
            return Err(Error::Shape(format!(
                "pipeline returned {} predictions for {} tiles",
                preds.len(),
                val.len()
            )));
        }
        tracing::info!(fold = f, n_train = train.len(), n_val = val.len(), "fold evaluated");
        for (t, y_hat) in val.iter().zip(preds) {
            if !y_hat.is_finite() {
                return Err(Error::NonFiniteLoss(format!("prediction for `{}` is {y_hat}", t.tile_id)));
            }
            entries.push(PredictionEntry {
                tile_id: t.tile_id.clone(),
                y: t.label().expect("checked above"),
                y_hat: y_hat.max(0.0),
                region_key: t.region_key.clone(),
                fold: Some(f),
            });
        }
    }
    let set = PredictionSet::new(entries)?;
    let metrics = compute_metrics(&set);
    Ok((set, metrics))
}
