use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::chip::{Chip, ChipSource};
use crate::error::{Error, Result};
use crate::geogrid::{GridDef, Tile};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    acquisition_year: Option<i32>,
}

/// Directory of `<tile_id>.png` chips with `<tile_id>.json` sidecars.
#[derive(Clone, Debug)]
pub struct ChipCache {
    dir: PathBuf,
}

impl ChipCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ChipCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn png_path(&self, tile_id: &str) -> PathBuf {
        self.dir.join(format!("{tile_id}.png"))
    }

    fn sidecar_path(&self, tile_id: &str) -> PathBuf {
        self.dir.join(format!("{tile_id}.json"))
    }

    pub fn contains(&self, tile_id: &str) -> bool {
        self.png_path(tile_id).exists()
    }

    pub fn put(&self, chip: &Chip) -> Result<()> {
        let path = self.png_path(&chip.tile_id);
        let png = encode_png(&chip.pixels_raw)?;
        fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
        let side = self.sidecar_path(&chip.tile_id);
        let json = serde_json::to_vec(&Sidecar {
            acquisition_year: chip.acquisition_year,
        })?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn get(&self, tile_id: &str) -> Result<Chip> {
        let path = self.png_path(tile_id);
        let img = image::open(&path)
            .map_err(|e| Error::ChipWindow {
                tile_id: tile_id.to_string(),
                reason: format!("{}: {e}", path.display()),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut chip = Chip::new(tile_id, pixels)?;
        let side = self.sidecar_path(tile_id);
        if side.exists() {
            let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
            let meta: Sidecar = serde_json::from_slice(&bytes)?;
            chip.acquisition_year = meta.acquisition_year;
        }
        Ok(chip)
    }
}

impl ChipSource for ChipCache {
    fn chip(&self, tile: &Tile, _grid: &GridDef) -> Result<Chip> {
        self.get(&tile.tile_id)
    }
}

/// PNG bytes of an RGB `(row, col, band)` array.
pub fn encode_png(pixels: &Array3<u8>) -> Result<Vec<u8>> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 bands, got {c}")));
    }
    let img = RgbImage::from_raw(w as u32, h as u32, pixels.iter().copied().collect())
        .ok_or_else(|| Error::Shape("pixel buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
