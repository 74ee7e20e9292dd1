//! End-to-end pipelines assembled from the encoder, forest and evaluation
//! modules: the training-mean baseline, a forest over a fixed feature table,
//! and per-fold fine-tuning followed by a forest over the fine-tuned
//! representations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{extract, finetune, predict_mc_dropout, Encoder, FinetuneConfig, TrainingLog};
use crate::error::{Error, Result};
use crate::evalx::{check_cv_inputs, compute_metrics, split_fold, MetricsReport, Pipeline, PredictionEntry, PredictionSet};
use crate::geogrid::{FoldSpec, Tile};
use crate::imagery::{prepare_for_model, Chip};
use crate::mapgen::{TileEstimate, TilePredictor};
use crate::regress::{
    fit, fit_null, grid_search_folds, FeatureTable, FoldData, Forest, GridSearchResult, ModelKind, ParamGrid,
    PopulationModel, RFConfig,
};
use crate::seed::derive_seed_index;

fn labels_of(tiles: &[Tile]) -> Result<BTreeMap<String, f64>> {
    tiles
        .iter()
        .map(|t| {
            t.label()
                .map(|y| (t.tile_id.clone(), y))
                .ok_or_else(|| Error::InvalidArgument(format!("tile `{}` has no usable label", t.tile_id)))
        })
        .collect()
}

/// Predicts the training mean everywhere.
#[derive(Debug, Default)]
pub struct NullPipeline {
    model: Option<PopulationModel>,
}

impl Pipeline for NullPipeline {
    fn fit(&mut self, train: &[Tile]) -> Result<()> {
        self.model = Some(fit_null(&labels_of(train)?)?);
        Ok(())
    }

    fn predict(&self, tiles: &[Tile]) -> Result<Vec<f64>> {
        let model = self.model.as_ref().ok_or(Error::NotFitted)?;
        tiles.iter().map(|_| Ok(model.predict_row(&[])?.mean)).collect()
    }
}

/// Random forest over rows of a fixed feature table.
#[derive(Debug)]
pub struct ForestPipeline<'a> {
    table: &'a FeatureTable,
    config: RFConfig,
    model: Option<PopulationModel>,
}

impl<'a> ForestPipeline<'a> {
    pub fn new(table: &'a FeatureTable, config: RFConfig) -> Self {
        ForestPipeline { table, config, model: None }
    }
}

impl Pipeline for ForestPipeline<'_> {
    fn fit(&mut self, train: &[Tile]) -> Result<()> {
        self.model = Some(fit(self.table, &labels_of(train)?, &self.config)?);
        Ok(())
    }

    fn predict(&self, tiles: &[Tile]) -> Result<Vec<f64>> {
        let model = self.model.as_ref().ok_or(Error::NotFitted)?;
        let rows = self.table.select(tiles.iter().map(|t| t.tile_id.as_str()))?;
        rows.into_iter().map(|r| Ok(model.predict_row(r)?.mean)).collect()
    }
}

/// Settings for fine-tuning plus forest, per fold or on all labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderForestConfig {
    pub finetune: FinetuneConfig,
    /// Fixed forest settings; when absent the grid is searched.
    pub forest: Option<RFConfig>,
    pub grid: ParamGrid,
    pub seed: u64,
}

impl Default for EncoderForestConfig {
    fn default() -> Self {
        EncoderForestConfig {
            finetune: FinetuneConfig::default(),
            forest: None,
            grid: ParamGrid::default(),
            seed: 0,
        }
    }
}

/// Chips keyed by tile id, each prepared for `encoder` once.
pub fn prepare_chips(encoder: &Encoder, chips: Vec<Chip>) -> Result<BTreeMap<String, Chip>> {
    let stats = encoder.manifest().normalization_stats;
    let prepared: Vec<Chip> = chips
        .into_par_iter()
        .map(|c| if c.pixels_model.is_some() { Ok(c) } else { prepare_for_model(&c, &stats) })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for c in prepared {
        let id = c.tile_id.clone();
        if out.insert(id.clone(), c).is_some() {
            return Err(Error::DuplicateTile(id));
        }
    }
    Ok(out)
}

fn chips_for<'a>(chips: &'a BTreeMap<String, Chip>, tiles: &[Tile]) -> Result<Vec<&'a Chip>> {
    let missing: Vec<String> = tiles
        .iter()
        .filter(|t| !chips.contains_key(&t.tile_id))
        .map(|t| t.tile_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }
    Ok(tiles.iter().map(|t| &chips[&t.tile_id]).collect())
}

fn representations(encoder: &Encoder, chips: &[&Chip]) -> Result<Vec<Vec<f64>>> {
    let owned: Vec<Chip> = chips.iter().map(|&c| c.clone()).collect();
    Ok(extract(encoder, &owned)?.into_iter().map(|r| r.vector).collect())
}

fn finetune_on(
    base: &Encoder,
    train: &[Tile],
    chips: &BTreeMap<String, Chip>,
    cfg: &FinetuneConfig,
) -> Result<(Encoder, TrainingLog, Vec<Vec<f64>>)> {
    let train_chips = chips_for(chips, train)?;
    let labelled: Vec<(Chip, f64)> = train
        .iter()
        .zip(&train_chips)
        .map(|(t, c)| ((*c).clone(), t.label().expect("labelled tile")))
        .collect();
    let (encoder, log) = finetune(base, &labelled, cfg)?;
    let reps = representations(&encoder, &train_chips)?;
    Ok((encoder, log, reps))
}

#[derive(Clone, Debug)]
pub struct EncoderCvReport {
    pub predictions: PredictionSet,
    pub metrics: MetricsReport,
    pub best: RFConfig,
    /// Present when the grid was searched.
    pub grid: Option<GridSearchResult>,
    pub training_logs: Vec<TrainingLog>,
}

/// Cross-validates fine-tuning plus forest.
///
/// Each fold fine-tunes its own copy of `base` on that fold's training tiles
/// only. Without a fixed forest configuration, every grid point is scored by
/// the pooled held-out MeAE over the same folds and the best one produces the
/// reported predictions.
pub fn encoder_forest_cv(
    base: &Encoder,
    tiles: &[Tile],
    chips: &BTreeMap<String, Chip>,
    folds: &FoldSpec,
    cfg: &EncoderForestConfig,
) -> Result<EncoderCvReport> {
    check_cv_inputs(tiles, folds)?;
    let mut fold_rows = Vec::new();
    let mut val_tiles = Vec::new();
    let mut logs = Vec::new();
    for f in 0..folds.n_folds() {
        let (train, val) = split_fold(tiles, folds, f)?;
        let ft = FinetuneConfig {
            seed: derive_seed_index(cfg.finetune.seed, f as u64),
            ..cfg.finetune.clone()
        };
        let (encoder, log, train_x) = finetune_on(base, &train, chips, &ft)?;
        let val_x = representations(&encoder, &chips_for(chips, &val)?)?;
        tracing::info!(fold = f, epochs = log.records.len(), "fold fine-tuned");
        fold_rows.push(FoldData {
            train_x,
            train_y: train.iter().map(|t| t.label().expect("labelled")).collect(),
            val_x,
            val_y: val.iter().map(|t| t.label().expect("labelled")).collect(),
        });
        val_tiles.push((f, val));
        logs.push(log);
    }

    let (best, grid) = match &cfg.forest {
        Some(rf) => (*rf, None),
        None => {
            let result = grid_search_folds(&fold_rows, &cfg.grid, cfg.seed)?;
            (result.best, Some(result))
        }
    };

    let mut entries = Vec::with_capacity(tiles.len());
    for (data, (f, val)) in fold_rows.iter().zip(val_tiles) {
        if val.is_empty() {
            continue;
        }
        let x: Vec<&[f64]> = data.train_x.iter().map(Vec::as_slice).collect();
        let forest = Forest::fit(&x, &data.train_y, &best)?;
        for (t, row) in val.iter().zip(&data.val_x) {
            let preds = forest.tree_predictions(row);
            let y_hat = preds.iter().sum::<f64>() / preds.len() as f64;
            entries.push(PredictionEntry {
                tile_id: t.tile_id.clone(),
                y: t.label().expect("labelled"),
                y_hat: y_hat.max(0.0),
                region_key: t.region_key.clone(),
                fold: Some(f),
            });
        }
    }
    let predictions = PredictionSet::new(entries)?;
    let metrics = compute_metrics(&predictions);
    Ok(EncoderCvReport {
        predictions,
        metrics,
        best,
        grid,
        training_logs: logs,
    })
}

/// Encoder fine-tuned on every labelled tile plus a forest on its representations.
#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub encoder: Encoder,
    pub log: TrainingLog,
    pub model: PopulationModel,
}

pub fn train_encoder_forest(
    base: &Encoder,
    tiles: &[Tile],
    chips: &BTreeMap<String, Chip>,
    finetune_cfg: &FinetuneConfig,
    rf: &RFConfig,
) -> Result<TrainedPipeline> {
    let labels = labels_of(tiles)?;
    let (encoder, log, reps) = finetune_on(base, tiles, chips, finetune_cfg)?;
    let rows = tiles.iter().map(|t| t.tile_id.clone()).zip(reps).collect();
    let names = (0..encoder.repr_dim()).map(|i| format!("r{i}")).collect();
    let table = FeatureTable::new(names, rows, crate::regress::FeatureSource::Representation)?;
    let model = fit(&table, &labels, rf)?;
    Ok(TrainedPipeline { encoder, log, model })
}

/// Representations from the encoder, estimates from the forest; the standard
/// deviation across trees is reported as uncertainty. A null model ignores
/// the imagery.
pub struct EncoderForestPredictor<'a> {
    pub encoder: &'a Encoder,
    pub model: &'a PopulationModel,
}

impl TilePredictor for EncoderForestPredictor<'_> {
    fn provenance(&self) -> String {
        match self.model.kind {
            ModelKind::Null => format!("null model {}", self.model.training_fingerprint),
            ModelKind::RandomForest => format!(
                "encoder {} + forest {}",
                self.encoder.fingerprint(),
                self.model.training_fingerprint
            ),
        }
    }

    fn predict(&self, chips: &[Chip]) -> Result<Vec<TileEstimate>> {
        let rows: Vec<Vec<f64>> = match self.model.kind {
            ModelKind::Null => vec![Vec::new(); chips.len()],
            ModelKind::RandomForest => extract(self.encoder, chips)?.into_iter().map(|r| r.vector).collect(),
        };
        rows.iter()
            .map(|r| {
                let p = self.model.predict_row(r)?;
                Ok(TileEstimate { mean: p.mean, std: Some(p.std) })
            })
            .collect()
    }
}

/// Estimates from the encoder's regression head, optionally with Monte Carlo
/// dropout uncertainty under a recorded seed.
pub struct HeadPredictor<'a> {
    pub encoder: &'a Encoder,
    /// `(n_passes, p, seed)`.
    pub mc_dropout: Option<(usize, f64, u64)>,
}

impl TilePredictor for HeadPredictor<'_> {
    fn provenance(&self) -> String {
        match self.mc_dropout {
            Some((n, p, seed)) => format!("encoder {} (mc dropout n={n} p={p} seed={seed})", self.encoder.fingerprint()),
            None => format!("encoder {}", self.encoder.fingerprint()),
        }
    }

    fn predict(&self, chips: &[Chip]) -> Result<Vec<TileEstimate>> {
        match self.mc_dropout {
            Some((n, p, seed)) => Ok(predict_mc_dropout(self.encoder, chips, n, p, seed)?
                .into_iter()
                .map(|m| TileEstimate { mean: m.mean, std: Some(m.std) })
                .collect()),
            None => Ok(self
                .encoder
                .predict(chips)?
                .into_iter()
                .map(|mean| TileEstimate { mean, std: None })
                .collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalx::crossvalidate;
    use crate::geogrid::make_spatial_folds;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn null_pipeline_predicts_training_mean() {
        let d = generate(&SynthConfig { n_rows: 4, n_cols: 4, ..SynthConfig::default() }).unwrap();
        let folds = make_spatial_folds(&d.tiles, 2).unwrap();
        let (set, _) = crossvalidate(&mut NullPipeline::default(), &d.tiles, &folds).unwrap();
        for f in 0..2 {
            let train: Vec<f64> = d
                .tiles
                .iter()
                .filter(|t| folds.fold_of(&t.tile_id) != Some(f))
                .filter_map(|t| t.label())
                .collect();
            let mean = train.iter().sum::<f64>() / train.len() as f64;
            for e in set.entries().iter().filter(|e| e.fold == Some(f)) {
                assert!((e.y_hat - mean).abs() < 1e-12);
            }
        }
    }
}
