use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{median, quantile};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub tile_id: String,
    pub y: f64,
    pub y_hat: f64,
    pub region_key: String,
    #[serde(default)]
    pub fold: Option<usize>,
}

/// Observed and predicted population for a set of distinct tiles.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    entries: Vec<PredictionEntry>,
}

impl PredictionSet {
    pub fn new(entries: Vec<PredictionEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.tile_id.as_str()) {
                return Err(Error::DuplicateTile(e.tile_id.clone()));
            }
            if !(e.y.is_finite() && e.y >= 0.0 && e.y_hat.is_finite() && e.y_hat >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "tile `{}` has y = {}, y_hat = {}; both must be finite and non-negative",
                    e.tile_id, e.y, e.y_hat
                )));
            }
        }
        Ok(PredictionSet { entries })
    }

    pub fn entries(&self) -> &[PredictionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<Vec<PredictionEntry>, _>>()?;
        Self::new(entries)
    }
}

/// Evaluation metrics over one pool of predictions. Undefined values are NaN
/// in memory and `null` in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "crate::nan_as_null")]
    pub r2: f64,
    /// False when every observed value is identical.
    pub r2_defined: bool,
    #[serde(with = "crate::nan_as_null")]
    pub meape: f64,
    #[serde(with = "crate::nan_as_null")]
    pub meae: f64,
    #[serde(with = "crate::nan_as_null")]
    pub iqr_abs_err: f64,
    #[serde(with = "crate::nan_as_null")]
    pub aggpe: f64,
    pub n: usize,
    /// Entries with `y = 0`, left out of MeAPE.
    pub excluded_from_meape: usize,
    /// Regions with zero observed total, left out of AggPE.
    pub aggpe_excluded_regions: Vec<String>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// R², MeAE, MeAPE (over `y > 0`), the interquartile range of absolute
/// errors, and AggPE, the median over regions of the relative error of the
/// regional totals.
pub fn compute_metrics(p: &PredictionSet) -> MetricsReport {
    let e = p.entries();
    let n = e.len();
    let abs: Vec<f64> = e.iter().map(|x| (x.y - x.y_hat).abs()).collect();
    let ape: Vec<f64> = e.iter().filter(|x| x.y > 0.0).map(|x| (x.y - x.y_hat).abs() / x.y).collect();

    let y_mean = e.iter().map(|x| x.y).sum::<f64>() / n as f64;
    let ss_tot: f64 = e.iter().map(|x| (x.y - y_mean).powi(2)).sum();
    let ss_res: f64 = e.iter().map(|x| (x.y - x.y_hat).powi(2)).sum();
    let r2_defined = n >= 2 && ss_tot > 0.0;
    let r2 = if r2_defined { 1.0 - ss_res / ss_tot } else { f64::NAN };

    let mut regions: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for x in e {
        let t = regions.entry(x.region_key.as_str()).or_default();
        t.0 += x.y;
        t.1 += x.y_hat;
    }
    let mut excluded = Vec::new();
    let mut region_err = Vec::new();
    for (r, (sy, sh)) in regions {
        if sy > 0.0 {
            region_err.push((sy - sh).abs() / sy);
        } else {
            excluded.push(r.to_string());
        }
    }

    MetricsReport {
        r2,
        r2_defined,
        meape: median(&ape).unwrap_or(f64::NAN),
        meae: median(&abs).unwrap_or(f64::NAN),
        iqr_abs_err: match (quantile(&abs, 0.25), quantile(&abs, 0.75)) {
            (Some(q1), Some(q3)) => q3 - q1,
            _ => f64::NAN,
        },
        aggpe: median(&region_err).unwrap_or(f64::NAN),
        n,
        excluded_from_meape: n - ape.len(),
        aggpe_excluded_regions: excluded,
    }
}
