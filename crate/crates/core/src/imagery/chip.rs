use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use super::raster::GeoRaster;
use crate::error::{Error, Result};
use crate::geogrid::{GridDef, Tile};

/// Side of a raw chip in pixels: a 100 m tile at 50 cm resolution.
pub const CHIP_SIDE: usize = 200;
/// Side of the encoder input.
pub const MODEL_SIDE: usize = 224;

/// Pixel content of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub tile_id: String,
    /// `(row, col, band)` RGB intensities.
    pub pixels_raw: Array3<u8>,
    /// Resized and standardized encoder input, `(row, col, band)`.
    pub pixels_model: Option<Array3<f32>>,
    pub acquisition_year: Option<i32>,
}

impl Chip {
    pub fn new(tile_id: impl Into<String>, pixels_raw: Array3<u8>) -> Result<Self> {
        if pixels_raw.dim() != (CHIP_SIDE, CHIP_SIDE, 3) {
            return Err(Error::Shape(format!(
                "raw chip must be {CHIP_SIDE}x{CHIP_SIDE}x3, got {:?}",
                pixels_raw.dim()
            )));
        }
        Ok(Chip {
            tile_id: tile_id.into(),
            pixels_raw,
            pixels_model: None,
            acquisition_year: None,
        })
    }

    pub fn model_pixels(&self) -> Result<&Array3<f32>> {
        self.pixels_model.as_ref().ok_or_else(|| {
            Error::Shape(format!("chip `{}` has not been prepared for the model", self.tile_id))
        })
    }
}

/// Per-channel statistics of the encoder's training data, on the `[0, 1]` scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizationStats {
    /// ImageNet statistics, which the common pretrained checkpoints use.
    fn default() -> Self {
        NormalizationStats {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Anything that can produce the raw chip for a tile.
pub trait ChipSource: Sync {
    fn chip(&self, tile: &Tile, grid: &GridDef) -> Result<Chip>;
}

impl ChipSource for GeoRaster {
    fn chip(&self, tile: &Tile, grid: &GridDef) -> Result<Chip> {
        extract_chip(self, tile, grid)
    }
}

/// Reads the 200x200 window covering a tile's box.
///
/// The window must align with the raster's pixel grid and lie fully inside it;
/// windows touching nodata pixels are rejected.
pub fn extract_chip(raster: &GeoRaster, tile: &Tile, grid: &GridDef) -> Result<Chip> {
    let fail = |reason: String| Error::ChipWindow {
        tile_id: tile.tile_id.clone(),
        reason,
    };
    grid.check_crs(&raster.georef.crs_code)?;
    if !grid.contains_cell(tile.row, tile.col) {
        return Err(fail("tile lies outside the grid".into()));
    }
    let g = &raster.georef;
    let b = grid.cell_bounds(tile.row, tile.col);
    let col0 = pixel_offset((b.min_x - g.origin_x) / g.pixel_width).ok_or_else(|| {
        fail("tile edge is not aligned with the raster pixel grid".into())
    })?;
    let row0 = pixel_offset((g.origin_y - b.max_y) / g.pixel_height).ok_or_else(|| {
        fail("tile edge is not aligned with the raster pixel grid".into())
    })?;
    let side_x = pixel_offset(grid.cell_size / g.pixel_width);
    let side_y = pixel_offset(grid.cell_size / g.pixel_height);
    if side_x != Some(CHIP_SIDE as i64) || side_y != Some(CHIP_SIDE as i64) {
        return Err(fail(format!(
            "cell of {} m at {}x{} m pixels is not {CHIP_SIDE} pixels wide",
            grid.cell_size, g.pixel_width, g.pixel_height
        )));
    }
    let (h, w) = (raster.height() as i64, raster.width() as i64);
    let side = CHIP_SIDE as i64;
    if row0 < 0 || col0 < 0 || row0 + side > h || col0 + side > w {
        return Err(fail(format!(
            "window rows {row0}..{} cols {col0}..{} exceeds raster {h}x{w}",
            row0 + side,
            col0 + side
        )));
    }
    let window = raster.window(row0 as usize, col0 as usize, CHIP_SIDE, CHIP_SIDE);
    if let Some(nd) = raster.nodata {
        let has_gap = window
            .outer_iter()
            .any(|row| row.outer_iter().any(|px| px.iter().all(|&v| v == nd)));
        if has_gap {
            return Err(fail("window contains nodata pixels".into()));
        }
    }
    Chip::new(tile.tile_id.clone(), window.to_owned())
}

fn pixel_offset(v: f64) -> Option<i64> {
    let r = v.round();
    ((v - r).abs() < 1e-6).then_some(r as i64)
}

/// Bilinear resampling with pixel-centre alignment (`align_corners = false`),
/// clamping at the borders.
pub fn resize_bilinear(src: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (in_h, in_w, bands) = src.dim();
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = taps(in_h, out_h);
    let xs = taps(in_w, out_w);
    let mut out = Array3::zeros((out_h, out_w, bands));
    for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, wx)) in xs.iter().enumerate() {
            for c in 0..bands {
                let top = src[[y0, x0, c]] * (1.0 - wx) + src[[y0, x1, c]] * wx;
                let bottom = src[[y1, x0, c]] * (1.0 - wx) + src[[y1, x1, c]] * wx;
                out[[i, j, c]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// Resizes 200x200 to 224x224, scales to `[0, 1]` and standardizes per channel.
pub fn prepare_for_model(chip: &Chip, stats: &NormalizationStats) -> Result<Chip> {
    if chip.pixels_raw.dim() != (CHIP_SIDE, CHIP_SIDE, 3) {
        return Err(Error::Shape(format!(
            "raw chip `{}` has shape {:?}",
            chip.tile_id,
            chip.pixels_raw.dim()
        )));
    }
    stats.validate()?;
    let raw = chip.pixels_raw.mapv(f64::from);
    let resized = resize_bilinear(raw.view(), MODEL_SIDE, MODEL_SIDE);
    let mut out = chip.clone();
    out.pixels_model = Some(standardize(&resized, stats));
    Ok(out)
}

pub(crate) fn standardize(rgb_255: &Array3<f64>, stats: &NormalizationStats) -> Array3<f32> {
    let mut model = Array3::<f32>::zeros(rgb_255.dim());
    Zip::indexed(&mut model).and(rgb_255).for_each(|(_, _, c), m, &v| {
        *m = ((v / 255.0 - stats.mean[c]) / stats.std[c]) as f32;
    });
    model
}
