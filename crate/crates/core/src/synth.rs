//! Synthetic districts for demonstrations and end-to-end checks: each tile
//! shows a number of bright blobs on a textured background, and its population
//! is that count plus Gaussian noise.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{write_tile_manifest, GridDef, Tile, TileStatus};
use crate::imagery::{Chip, ChipCache, GeoRaster, GeoReference, CHIP_SIDE};
use crate::mapgen::PopulationRaster;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub district_id: String,
    pub n_rows: usize,
    pub n_cols: usize,
    pub max_blobs: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            district_id: "SYN".into(),
            n_rows: 20,
            n_cols: 20,
            max_blobs: 15,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub grid: GridDef,
    /// Row-major; tiles without blobs are zero tiles, the rest surveyed.
    pub tiles: Vec<Tile>,
    pub chips: Vec<Chip>,
    pub blob_counts: Vec<usize>,
    /// Blob centres per tile in map coordinates.
    pub blob_centres: Vec<Vec<(f64, f64)>>,
}

const RADIUS: std::ops::RangeInclusive<f64> = 5.0..=8.0;

fn render(rng: &mut ChaCha8Rng, n_blobs: usize) -> (Array3<u8>, Vec<(f64, f64)>) {
    let texture = Normal::new(0.0, 10.0).expect("valid normal");
    let tint: [f64; 3] = [rng.random_range(55.0..75.0), rng.random_range(60.0..85.0), rng.random_range(40.0..60.0)];
    let mut img: Array3<f64> = Array3::from_shape_fn((CHIP_SIDE, CHIP_SIDE, 3), |(_, _, c)| tint[c] + texture.sample(rng));
    let mut blobs: Vec<(f64, f64, f64)> = Vec::with_capacity(n_blobs);
    let side = CHIP_SIDE as f64;
    while blobs.len() < n_blobs {
        let r = rng.random_range(RADIUS);
        let (cy, cx) = (rng.random_range(r + 1.0..side - r - 1.0), rng.random_range(r + 1.0..side - r - 1.0));
        let clear = blobs
            .iter()
            .all(|&(y, x, q)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() > r + q + 3.0);
        if clear {
            blobs.push((cy, cx, r));
        }
    }
    for &(cy, cx, r) in &blobs {
        let level = rng.random_range(200.0..240.0);
        let (y0, y1) = ((cy - r).floor() as usize, (cy + r).ceil() as usize);
        let (x0, x1) = ((cx - r).floor() as usize, (cx + r).ceil() as usize);
        for i in y0..=y1.min(CHIP_SIDE - 1) {
            for j in x0..=x1.min(CHIP_SIDE - 1) {
                if ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt() <= r {
                    for c in 0..3 {
                        img[[i, j, c]] = level + texture.sample(rng) * 0.5;
                    }
                }
            }
        }
    }
    let px = img.mapv(|v| v.round().clamp(0.0, 255.0) as u8);
    (px, blobs.into_iter().map(|(y, x, _)| (x, y)).collect())
}

/// Generates the dataset; every tile draws from its own seeded stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.max_blobs > 40 {
        return Err(Error::InvalidArgument("at most 40 blobs fit on a chip".into()));
    }
    if !(cfg.noise_std.is_finite() && cfg.noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
    }
    let cell = 100.0;
    let grid = GridDef::new(
        500_000.0,
        7_100_000.0 + cfg.n_rows as f64 * cell,
        cell,
        cfg.n_rows,
        cfg.n_cols,
        "EPSG:32736",
        cfg.district_id.clone(),
    )?;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut out = SynthDataset {
        grid: grid.clone(),
        tiles: Vec::new(),
        chips: Vec::new(),
        blob_counts: Vec::new(),
        blob_centres: Vec::new(),
    };
    for r in 0..cfg.n_rows {
        for c in 0..cfg.n_cols {
            let id = grid.tile_id(r, c);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &id));
            let k = rng.random_range(0..=cfg.max_blobs);
            let (pixels, centres) = render(&mut rng, k);
            let e = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let mut tile = Tile::unlabelled(&grid, r, c);
            if k == 0 {
                tile.status = TileStatus::Zero;
                tile.population = Some(0.0);
            } else {
                tile.status = TileStatus::Surveyed;
                tile.population = Some((k as f64 + e).max(0.0));
            }
            let b = grid.cell_bounds(r, c);
            let scale = cell / CHIP_SIDE as f64;
            out.blob_centres.push(
                centres
                    .into_iter()
                    .map(|(x, y)| (b.min_x + x * scale, b.max_y - y * scale))
                    .collect(),
            );
            out.chips.push(Chip::new(id, pixels)?);
            out.tiles.push(tile);
            out.blob_counts.push(k);
        }
    }
    Ok(out)
}

impl SynthDataset {
    /// Reference settlement layer: the blob count of each cell.
    pub fn reference(&self) -> Result<PopulationRaster> {
        let v = Array2::from_shape_vec(
            (self.grid.n_rows, self.grid.n_cols),
            self.blob_counts.iter().map(|&k| k as f32).collect(),
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        PopulationRaster::new(self.grid.clone(), v, None, "synthetic settlement layer")
    }

    /// Mosaic of all chips at 50 cm pixels, aligned with the grid.
    pub fn mosaic(&self) -> Result<GeoRaster> {
        let (h, w) = (self.grid.n_rows * CHIP_SIDE, self.grid.n_cols * CHIP_SIDE);
        let mut px = Array3::<u8>::zeros((h, w, 3));
        for (t, chip) in self.tiles.iter().zip(&self.chips) {
            px.slice_mut(ndarray::s![
                t.row * CHIP_SIDE..(t.row + 1) * CHIP_SIDE,
                t.col * CHIP_SIDE..(t.col + 1) * CHIP_SIDE,
                ..
            ])
            .assign(&chip.pixels_raw);
        }
        let res = self.grid.cell_size / CHIP_SIDE as f64;
        GeoRaster::new(
            px,
            GeoReference {
                origin_x: self.grid.origin_x,
                origin_y: self.grid.origin_y,
                pixel_width: res,
                pixel_height: res,
                crs_code: self.grid.crs_code.clone(),
            },
            None,
        )
    }

    /// Writes a state directory usable by every command and by the curation
    /// service: `grids.json`, `tiles.jsonl`, `chips/`, `microcensus.csv`,
    /// `reference/<district>.tif`, `census.json` and, if asked, `mosaic.tif`.
    pub fn write(&self, dir: &Path, with_mosaic: bool) -> Result<()> {
        fs::create_dir_all(dir.join("reference")).map_err(|e| Error::io(dir, e))?;
        let grids = dir.join("grids.json");
        fs::write(&grids, serde_json::to_vec_pretty(&[&self.grid])?).map_err(|e| Error::io(&grids, e))?;
        write_tile_manifest(&dir.join("tiles.jsonl"), &self.tiles)?;
        let cache = ChipCache::open(dir.join("chips"))?;
        for chip in &self.chips {
            cache.put(chip)?;
        }
        self.write_microcensus(&dir.join("microcensus.csv"))?;
        self.reference()?
            .write_geotiff(&dir.join("reference").join(format!("{}.tif", self.grid.district_id)))?;
        let total: f64 = self.tiles.iter().filter_map(|t| t.population).sum();
        let census = dir.join("census.json");
        fs::write(&census, serde_json::to_vec_pretty(&[(&self.grid.district_id, total.round())].into_iter().collect::<std::collections::BTreeMap<_, _>>())?)
            .map_err(|e| Error::io(&census, e))?;
        if with_mosaic {
            self.mosaic()?.write_geotiff(&dir.join("mosaic.tif"))?;
        }
        Ok(())
    }

    /// One household per blob, sizes summing to the rounded tile population.
    fn write_microcensus(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "x,y,household_size,psu_id,survey_date").map_err(|e| Error::io(path, e))?;
        let date = NaiveDate::from_ymd_opt(2019, 6, 1).expect("valid date");
        for (t, centres) in self.tiles.iter().zip(&self.blob_centres) {
            let people = t.population.unwrap_or(0.0).round() as u32;
            if centres.is_empty() || people == 0 {
                continue;
            }
            let n = centres.len() as u32;
            for (i, (x, y)) in centres.iter().enumerate() {
                let size = people / n + u32::from((i as u32) < people % n);
                if size > 0 {
                    writeln!(w, "{x:.3},{y:.3},{size},PSU-{}-{},{date}", t.row / 5, t.col / 5)
                        .map_err(|e| Error::io(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_labelled_by_blob_count() {
        let cfg = SynthConfig { n_rows: 3, n_cols: 4, seed: 7, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.chips, b.chips);
        assert_eq!(a.tiles.len(), 12);
        for ((t, &k), centres) in a.tiles.iter().zip(&a.blob_counts).zip(&a.blob_centres) {
            t.validate().unwrap();
            assert!(k <= 15);
            assert_eq!(centres.len(), k);
            for &(x, y) in centres {
                assert_eq!(a.grid.cell_of(x, y), Some((t.row, t.col)));
            }
        }
    }

    #[test]
    fn noiseless_population_equals_blob_count() {
        let cfg = SynthConfig { n_rows: 2, n_cols: 2, noise_std: 0.0, ..SynthConfig::default() };
        let d = generate(&cfg).unwrap();
        for (t, &k) in d.tiles.iter().zip(&d.blob_counts) {
            assert_eq!(t.population, Some(k as f64));
        }
    }
}
