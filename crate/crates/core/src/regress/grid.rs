use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Forest, RFConfig};
use super::table::FeatureTable;
use crate::error::{Error, Result};
use crate::evalx::stats::median;
use crate::geogrid::FoldSpec;

/// Candidate values for each hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamGrid {
    pub num_estimators: Vec<usize>,
    pub min_samples_split: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        ParamGrid {
            num_estimators: vec![100, 200, 300, 400, 500],
            min_samples_split: vec![2, 5],
            min_samples_leaf: vec![1, 2],
        }
    }
}

impl ParamGrid {
    pub fn configs(&self, seed: u64) -> Vec<RFConfig> {
        let mut out = Vec::new();
        for &num_estimators in &self.num_estimators {
            for &min_samples_split in &self.min_samples_split {
                for &min_samples_leaf in &self.min_samples_leaf {
                    out.push(RFConfig {
                        num_estimators,
                        min_samples_split,
                        min_samples_leaf,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// Training and held-out rows of one fold.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    pub val_x: Vec<Vec<f64>>,
    pub val_y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    #[serde(flatten)]
    pub config: RFConfig,
    /// Median absolute error over the pooled held-out predictions.
    pub meae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub best: RFConfig,
    /// One row per configuration, in grid order.
    pub scores: Vec<GridScore>,
}

impl GridSearchResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["num_estimators", "min_samples_split", "min_samples_leaf", "seed", "meae"])?;
        for s in &self.scores {
            let c = &s.config;
            w.serialize((c.num_estimators, c.min_samples_split, c.min_samples_leaf, c.seed, s.meae))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Splits one feature table into per-fold training and held-out rows.
pub fn fold_data(table: &FeatureTable, labels: &BTreeMap<String, f64>, folds: &FoldSpec) -> Result<Vec<FoldData>> {
    folds.check_covers(labels.keys().map(String::as_str))?;
    table.select(labels.keys().map(String::as_str))?;
    let mut out = Vec::with_capacity(folds.n_folds());
    for f in 0..folds.n_folds() {
        let mut d = FoldData {
            train_x: vec![],
            train_y: vec![],
            val_x: vec![],
            val_y: vec![],
        };
        for (id, &y) in labels {
            let row = table.get(id).expect("selected above").to_vec();
            if folds.fold_of(id) == Some(f) {
                d.val_x.push(row);
                d.val_y.push(y);
            } else {
                d.train_x.push(row);
                d.train_y.push(y);
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Evaluates every configuration of `grid` by pooled held-out MeAE over the
/// given folds and returns the lowest, ties going to the lexicographically
/// smallest `(num_estimators, min_samples_split, min_samples_leaf)`.
///
/// For each split/leaf pair one forest of the largest size is grown per fold;
/// smaller forests are its prefixes, which is exactly what fitting them
/// directly would produce.
pub fn grid_search_folds(folds: &[FoldData], grid: &ParamGrid, seed: u64) -> Result<GridSearchResult> {
    let configs = grid.configs(seed);
    if configs.is_empty() {
        return Err(Error::InvalidArgument("empty parameter grid".into()));
    }
    for c in &configs {
        c.validate()?;
    }
    if folds.iter().any(|f| f.train_y.is_empty()) {
        return Err(Error::InvalidFolds("a fold has no training rows".into()));
    }
    let max_trees = *grid.num_estimators.iter().max().expect("non-empty grid");
    let mut errors: BTreeMap<RFConfig, Vec<f64>> = BTreeMap::new();
    for &split in &grid.min_samples_split {
        for &leaf in &grid.min_samples_leaf {
            let big = RFConfig {
                num_estimators: max_trees,
                min_samples_split: split,
                min_samples_leaf: leaf,
                seed,
            };
            for fold in folds {
                let x: Vec<&[f64]> = fold.train_x.iter().map(Vec::as_slice).collect();
                let forest = Forest::fit(&x, &fold.train_y, &big)?;
                for (row, &y) in fold.val_x.iter().zip(&fold.val_y) {
                    let trees = forest.tree_predictions(row);
                    let mut cum = Vec::with_capacity(trees.len() + 1);
                    cum.push(0.0);
                    for t in &trees {
                        cum.push(cum.last().unwrap() + t);
                    }
                    for &m in &grid.num_estimators {
                        let cfg = RFConfig { num_estimators: m, ..big };
                        let pred = (cum[m] / m as f64).max(0.0);
                        errors.entry(cfg).or_default().push((pred - y).abs());
                    }
                }
            }
        }
    }
    let scores: Vec<GridScore> = configs
        .iter()
        .map(|c| GridScore {
            config: *c,
            meae: errors.get(c).and_then(|e| median(e)).unwrap_or(f64::NAN),
        })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| a.meae.total_cmp(&b.meae).then(a.config.cmp(&b.config)))
        .expect("non-empty grid")
        .config;
    Ok(GridSearchResult { best, scores })
}

pub fn grid_search(
    table: &FeatureTable,
    labels: &BTreeMap<String, f64>,
    folds: &FoldSpec,
    grid: &ParamGrid,
    seed: u64,
) -> Result<GridSearchResult> {
    grid_search_folds(&fold_data(table, labels, folds)?, grid, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::model::Forest;

    fn data(n: usize, f: impl Fn(f64) -> f64) -> Vec<FoldData> {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        (0..2)
            .map(|k| {
                let mut d = FoldData { train_x: vec![], train_y: vec![], val_x: vec![], val_y: vec![] };
                for (i, &x) in xs.iter().enumerate() {
                    if i % 2 == k {
                        d.val_x.push(vec![x]);
                        d.val_y.push(f(x));
                    } else {
                        d.train_x.push(vec![x]);
                        d.train_y.push(f(x));
                    }
                }
                d
            })
            .collect()
    }

    #[test]
    fn evaluates_the_full_grid() {
        let r = grid_search_folds(&data(30, |x| (x * 6.0).floor()), &ParamGrid::default(), 1).unwrap();
        assert_eq!(r.scores.len(), 20);
        let mut uniq: Vec<RFConfig> = r.scores.iter().map(|s| s.config).collect();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 20);
    }

    #[test]
    fn ties_go_to_the_smallest_config() {
        let r = grid_search_folds(&data(20, |_| 3.0), &ParamGrid::default(), 0).unwrap();
        assert!(r.scores.iter().all(|s| s.meae == 0.0));
        assert_eq!((r.best.num_estimators, r.best.min_samples_split, r.best.min_samples_leaf), (100, 2, 1));
    }

    #[test]
    fn prefix_forests_equal_direct_fits() {
        let folds = data(24, |x| (x * 10.0).sin() + 2.0);
        let grid = ParamGrid { num_estimators: vec![3, 7], min_samples_split: vec![2], min_samples_leaf: vec![1] };
        let r = grid_search_folds(&folds, &grid, 9).unwrap();
        let mut errs = Vec::new();
        for f in &folds {
            let x: Vec<&[f64]> = f.train_x.iter().map(Vec::as_slice).collect();
            let forest = Forest::fit(&x, &f.train_y, &RFConfig { num_estimators: 3, min_samples_split: 2, min_samples_leaf: 1, seed: 9 }).unwrap();
            for (row, y) in f.val_x.iter().zip(&f.val_y) {
                let t = forest.tree_predictions(row);
                errs.push((t.iter().sum::<f64>() / 3.0 - y).abs());
            }
        }
        assert_eq!(r.scores[0].meae, median(&errs).unwrap());
    }
}
