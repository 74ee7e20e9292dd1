use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PopulationRaster;
use crate::error::{Error, Result};
use crate::geogrid::{GridDef, Tile};
use crate::imagery::{Chip, ChipSource};

const ROW_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileEstimate {
    pub mean: f64,
    pub std: Option<f64>,
}

/// A trained pipeline seen from the map generator: chips in, estimates out,
/// one per chip and in the same order.
pub trait TilePredictor: Sync {
    /// Model fingerprint or product name recorded in the raster.
    fn provenance(&self) -> String;
    fn predict(&self, chips: &[Chip]) -> Result<Vec<TileEstimate>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub tile_id: String,
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipFailure {
    pub tile_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub provenance: String,
    pub n_cells: usize,
    pub n_valid: usize,
    pub n_nodata: usize,
    pub total: f64,
    pub failures: Vec<ChipFailure>,
}

#[derive(Clone, Debug)]
pub struct MapOutput {
    pub raster: PopulationRaster,
    pub report: MapReport,
    /// Estimates as returned by the predictor, row-major.
    pub predictions: Vec<CellPrediction>,
}

impl MapOutput {
    pub fn write_prediction_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.predictions {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.report)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Predicts every cell of `grid`, a block of rows at a time.
///
/// Cells whose chip cannot be extracted stay nodata and are listed in the
/// report. Negative estimates are clamped to zero; non-finite ones are an error.
pub fn generate_map(
    predictor: &dyn TilePredictor,
    grid: &GridDef,
    source: &dyn ChipSource,
) -> Result<MapOutput> {
    grid.validate()?;
    let shape = (grid.n_rows, grid.n_cols);
    let mut values = Array2::from_elem(shape, f32::NAN);
    let mut uncertainty = Array2::from_elem(shape, f32::NAN);
    let mut any_std = false;
    let mut predictions = Vec::new();
    let mut failures = Vec::new();

    for row0 in (0..grid.n_rows).step_by(ROW_BLOCK) {
        let rows = row0..(row0 + ROW_BLOCK).min(grid.n_rows);
        let tiles: Vec<Tile> = rows
            .flat_map(|r| (0..grid.n_cols).map(move |c| (r, c)))
            .map(|(r, c)| Tile::unlabelled(grid, r, c))
            .collect();
        let extracted: Vec<Result<Chip>> = tiles.par_iter().map(|t| source.chip(t, grid)).collect();
        let mut chips = Vec::with_capacity(tiles.len());
        let mut placed = Vec::with_capacity(tiles.len());
        for (tile, chip) in tiles.iter().zip(extracted) {
            match chip {
                Ok(chip) => {
                    chips.push(chip);
                    placed.push(tile);
                }
                Err(e) => failures.push(ChipFailure {
                    tile_id: tile.tile_id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        if chips.is_empty() {
            continue;
        }
        let estimates = predictor.predict(&chips)?;
        if estimates.len() != chips.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} estimates for {} chips",
                estimates.len(),
                chips.len()
            )));
        }
        for (tile, est) in placed.into_iter().zip(estimates) {
            if !est.mean.is_finite() || est.std.is_some_and(|s| !s.is_finite()) {
                return Err(Error::NonFiniteLoss(format!(
                    "non-finite estimate for tile `{}`",
                    tile.tile_id
                )));
            }
            let mean = est.mean.max(0.0);
            let std = est.std.map(|s| s.max(0.0));
            values[[tile.row, tile.col]] = mean as f32;
            if let Some(s) = std {
                uncertainty[[tile.row, tile.col]] = s as f32;
                any_std = true;
            }
            predictions.push(CellPrediction {
                tile_id: tile.tile_id.clone(),
                row: tile.row,
                col: tile.col,
                mean,
                std,
            });
        }
    }

    let provenance = predictor.provenance();
    let uncertainty = any_std.then(|| {
        // cells valid in band 1 without a std get 0 rather than nodata
        let mut u = uncertainty;
        for ((r, c), v) in u.indexed_iter_mut() {
            if v.is_nan() && !values[[r, c]].is_nan() {
                *v = 0.0;
            }
        }
        u
    });
    let raster = PopulationRaster::new(grid.clone(), values, uncertainty, provenance.clone())?;
    let n_valid = raster.n_valid();
    let report = MapReport {
        provenance,
        n_cells: grid.n_rows * grid.n_cols,
        n_valid,
        n_nodata: grid.n_rows * grid.n_cols - n_valid,
        total: raster.total(),
        failures,
    };
    Ok(MapOutput {
        raster,
        report,
        predictions,
    })
}
