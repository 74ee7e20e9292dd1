use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::table::FeatureTable;
use super::tree::{Tree, TreeParams};
use crate::error::{Error, Result};
use crate::evalx::stats::sample_std;
use crate::seed::derive_seed_index;

/// Random Forest hyperparameters. Field order is the tie-break order used by
/// the grid search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RFConfig {
    pub num_estimators: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RFConfig {
    fn default() -> Self {
        RFConfig {
            num_estimators: 100,
            min_samples_split: 2,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

impl RFConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_estimators == 0 || self.min_samples_split < 2 || self.min_samples_leaf == 0 {
            return Err(Error::InvalidArgument(format!(
                "random forest config {self:?} needs num_estimators >= 1, min_samples_split >= 2, min_samples_leaf >= 1"
            )));
        }
        Ok(())
    }
}

/// Bagged regression trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    /// Mean over trees of each tree's normalized squared-error decrease.
    pub importances: Vec<f64>,
}

impl Forest {
    /// Tree `t` is grown on a bootstrap sample drawn from a stream seeded by
    /// `(cfg.seed, t)`, so a forest's first `m` trees equal an `m`-tree forest.
    pub fn fit(x: &[&[f64]], y: &[f64], cfg: &RFConfig) -> Result<Forest> {
        cfg.validate()?;
        let n = y.len();
        if n == 0 || x.len() != n {
            return Err(Error::InvalidArgument("forest needs matching, non-empty rows and labels".into()));
        }
        let d = x[0].len();
        let params = TreeParams {
            min_samples_split: cfg.min_samples_split,
            min_samples_leaf: cfg.min_samples_leaf,
        };
        let fitted: Vec<(Tree, Vec<f64>)> = (0..cfg.num_estimators)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_index(cfg.seed, t as u64));
                let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut imp = vec![0.0; d];
                let tree = Tree::fit(x, y, sample, params, &mut imp);
                (tree, imp)
            })
            .collect();
        let mut importances = vec![0.0; d];
        let mut trees = Vec::with_capacity(fitted.len());
        for (tree, imp) in fitted {
            let total: f64 = imp.iter().sum();
            if total > 0.0 {
                for (a, v) in importances.iter_mut().zip(&imp) {
                    *a += v / total;
                }
            }
            trees.push(tree);
        }
        let k = trees.len() as f64;
        importances.iter_mut().for_each(|v| *v /= k);
        Ok(Forest {
            trees,
            n_features: d,
            importances,
        })
    }

    pub fn tree_predictions(&self, row: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(row)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest,
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    /// Forest average, clamped at zero.
    pub mean: f64,
    /// Sample standard deviation of the per-tree predictions.
    pub std: f64,
}

/// A fitted Random Forest or training-mean model with its metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub kind: ModelKind,
    pub rf_config: Option<RFConfig>,
    pub training_mean: Option<f64>,
    pub feature_source: String,
    pub feature_names: Vec<String>,
    pub fitted: bool,
    /// SHA-256 over the training ids, labels and feature rows.
    pub training_fingerprint: String,
    pub n_train: usize,
    pub forest: Option<Forest>,
}

fn training_rows<'a>(table: &'a FeatureTable, labels: &BTreeMap<String, f64>) -> Result<(Vec<&'a [f64]>, Vec<f64>)> {
    let x = table.select(labels.keys().map(String::as_str))?;
    let y: Vec<f64> = labels.values().copied().collect();
    if let Some((id, v)) = labels.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("label of `{id}` is {v}")));
    }
    Ok((x, y))
}

fn fingerprint(labels: &BTreeMap<String, f64>, rows: &[&[f64]]) -> String {
    let mut h = Sha256::new();
    for ((id, y), row) in labels.iter().zip(rows) {
        h.update(id.as_bytes());
        h.update(y.to_le_bytes());
        for v in row.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Fits a forest on the rows of `table` for every labelled tile.
pub fn fit(table: &FeatureTable, labels: &BTreeMap<String, f64>, cfg: &RFConfig) -> Result<PopulationModel> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 labelled tiles, got {}", labels.len())));
    }
    let (x, y) = training_rows(table, labels)?;
    let forest = Forest::fit(&x, &y, cfg)?;
    Ok(PopulationModel {
        kind: ModelKind::RandomForest,
        rf_config: Some(*cfg),
        training_mean: None,
        feature_source: table.source().to_string(),
        feature_names: table.feature_names().to_vec(),
        fitted: true,
        training_fingerprint: fingerprint(labels, &x),
        n_train: y.len(),
        forest: Some(forest),
    })
}

/// Model that predicts the mean training label everywhere.
pub fn fit_null(labels: &BTreeMap<String, f64>) -> Result<PopulationModel> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("null model needs at least one label".into()));
    }
    let mean = labels.values().sum::<f64>() / labels.len() as f64;
    Ok(PopulationModel {
        kind: ModelKind::Null,
        rf_config: None,
        training_mean: Some(mean),
        feature_source: "none".into(),
        feature_names: Vec::new(),
        fitted: true,
        training_fingerprint: fingerprint(labels, &[]),
        n_train: labels.len(),
        forest: None,
    })
}

impl PopulationModel {
    /// Unclamped per-tree predictions for one feature row.
    pub fn tree_predictions(&self, row: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(Error::NotFitted);
        }
        match self.kind {
            ModelKind::Null => Ok(vec![self.training_mean.ok_or(Error::NotFitted)?]),
            ModelKind::RandomForest => {
                let forest = self.forest.as_ref().ok_or(Error::NotFitted)?;
                if row.len() != forest.n_features {
                    return Err(Error::Shape(format!(
                        "model expects {} features, got {}",
                        forest.n_features,
                        row.len()
                    )));
                }
                Ok(forest.tree_predictions(row))
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<TilePrediction> {
        let preds = self.tree_predictions(row)?;
        let mean = if preds.iter().all(|&p| p == preds[0]) {
            preds[0]
        } else {
            preds.iter().sum::<f64>() / preds.len() as f64
        };
        Ok(TilePrediction {
            mean: mean.max(0.0),
            std: sample_std(&preds),
        })
    }

    /// Feature importances by name; empty for the null model.
    pub fn importances(&self) -> Vec<(String, f64)> {
        match &self.forest {
            Some(f) => self.feature_names.iter().cloned().zip(f.importances.iter().copied()).collect(),
            None => Vec::new(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Mean and tree spread for every row of `table`.
pub fn predict_with_uncertainty(model: &PopulationModel, table: &FeatureTable) -> Result<BTreeMap<String, TilePrediction>> {
    if !model.fitted {
        return Err(Error::NotFitted);
    }
    if model.kind == ModelKind::RandomForest && table.feature_names() != model.feature_names.as_slice() {
        return Err(Error::Shape(format!(
            "feature columns differ from training: expected {} columns, got {}",
            model.feature_names.len(),
            table.n_features()
        )));
    }
    let rows: Vec<(&String, &Vec<f64>)> = table.rows().iter().collect();
    rows.par_iter()
        .map(|(id, row)| Ok(((*id).clone(), model.predict_row(row)?)))
        .collect()
}
