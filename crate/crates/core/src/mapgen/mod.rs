//! District population rasters: generation from a trained predictor, GeoTIFF
//! exchange, comparison against third-party products and census checks.

mod compare;
mod generate;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::geogrid::GridDef;
use crate::imagery::GeoReference;

pub use compare::{census_check, compare_products, read_census_totals, ProductComparison};
pub use generate::{generate_map, CellPrediction, MapOutput, MapReport, TileEstimate, TilePredictor};

/// Value written for cells without an estimate.
pub const NODATA: f32 = -1.0;

/// Persons per grid cell over one district, rows north to south.
///
/// Cells without an estimate hold NaN in memory and [`NODATA`] on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationRaster {
    pub grid: GridDef,
    pub values: Array2<f32>,
    pub uncertainty: Option<Array2<f32>>,
    pub provenance: String,
}

struct TwoBandF32;

impl colortype::ColorType for TwoBandF32 {
    type Inner = f32;
    const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
    const BITS_PER_SAMPLE: &'static [u16] = &[32, 32];
    const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP, SampleFormat::IEEEFP];

    fn horizontal_predict(_: &[f32], _: &mut Vec<f32>) {
        unreachable!("predictor is never enabled")
    }
}

fn check_band(name: &str, band: &Array2<f32>, grid: &GridDef) -> Result<()> {
    if band.dim() != (grid.n_rows, grid.n_cols) {
        return Err(Error::Shape(format!(
            "{name} is {:?}, grid is {}x{}",
            band.dim(),
            grid.n_rows,
            grid.n_cols
        )));
    }
    if let Some(v) = band.iter().find(|v| !v.is_nan() && !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Raster(format!("{name} contains invalid value {v}")));
    }
    Ok(())
}

impl PopulationRaster {
    pub fn new(
        grid: GridDef,
        values: Array2<f32>,
        uncertainty: Option<Array2<f32>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        grid.validate()?;
        check_band("values", &values, &grid)?;
        if let Some(u) = &uncertainty {
            check_band("uncertainty", u, &grid)?;
        }
        Ok(PopulationRaster {
            grid,
            values,
            uncertainty,
            provenance: provenance.into(),
        })
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        !self.values[[row, col]].is_nan()
    }

    pub fn n_valid(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    /// Sum over valid cells, accumulated in double precision.
    pub fn total(&self) -> f64 {
        self.values
            .iter()
            .filter(|v| !v.is_nan())
            .map(|&v| f64::from(v))
            .sum()
    }

    fn georef(&self) -> GeoReference {
        GeoReference {
            origin_x: self.grid.origin_x,
            origin_y: self.grid.origin_y,
            pixel_width: self.grid.cell_size,
            pixel_height: self.grid.cell_size,
            crs_code: self.grid.crs_code.clone(),
        }
    }

    /// Float32 GeoTIFF: band 1 estimates, band 2 (when present) uncertainty std.
    pub fn write_geotiff(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = TiffEncoder::new(BufWriter::new(file))?;
        let (h, w) = (self.grid.n_rows as u32, self.grid.n_cols as u32);
        let encode = |v: f32| if v.is_nan() { NODATA } else { v };
        let nodata = NODATA.to_string();
        match &self.uncertainty {
            None => {
                let mut img = enc.new_image::<colortype::Gray32Float>(w, h)?;
                self.georef().write_tags(img.encoder(), Some(&nodata))?;
                img.encoder().write_tag(Tag::ImageDescription, self.provenance.as_str())?;
                let data: Vec<f32> = self.values.iter().map(|&v| encode(v)).collect();
                img.write_data(&data)?;
            }
            Some(unc) => {
                let mut img = enc.new_image::<TwoBandF32>(w, h)?;
                self.georef().write_tags(img.encoder(), Some(&nodata))?;
                img.encoder().write_tag(Tag::ImageDescription, self.provenance.as_str())?;
                img.encoder().write_tag(Tag::ExtraSamples, 0u16)?;
                let data: Vec<f32> = self
                    .values
                    .iter()
                    .zip(unc.iter())
                    .flat_map(|(&v, &u)| {
                        if v.is_nan() {
                            [NODATA, NODATA]
                        } else {
                            [v, encode(u)]
                        }
                    })
                    .collect();
                img.write_data(&data)?;
            }
        }
        Ok(())
    }

    /// Reads a single-district float raster written by this crate or by any
    /// GIS tool, taking the grid from its georeferencing.
    ///
    /// Cells equal to the file's nodata value (or [`NODATA`] when it declares
    /// none) or holding NaN become nodata.
    pub fn read_geotiff(path: &Path, district_id: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = Decoder::new(BufReader::new(file))?;
        let (w, h) = dec.dimensions()?;
        let bands = match dec.colortype()? {
            ColorType::Gray(32) => 1,
            ColorType::Multiband { bit_depth: 32, num_samples } => usize::from(num_samples),
            other => {
                return Err(Error::Raster(format!(
                    "{}: expected float32 samples, found {other:?}",
                    path.display()
                )))
            }
        };
        let (georef, nodata) = GeoReference::read_tags(&mut dec)?;
        if georef.pixel_width != georef.pixel_height {
            return Err(Error::Raster(format!(
                "{}: pixels are {}x{}, grid cells must be square",
                path.display(),
                georef.pixel_width,
                georef.pixel_height
            )));
        }
        let provenance = dec
            .find_tag(Tag::ImageDescription)?
            .map(|v| v.into_string())
            .transpose()?
            .map(|s| s.trim_end_matches('\0').to_string())
            .unwrap_or_else(|| path.display().to_string());
        let nodata = match nodata {
            Some(s) => s
                .parse::<f32>()
                .map_err(|_| Error::Raster(format!("unparseable nodata value `{s}`")))?,
            None => NODATA,
        };
        let data = match dec.read_image()? {
            DecodingResult::F32(v) => v,
            _ => return Err(Error::Raster("expected IEEE float samples".into())),
        };
        let (w, h) = (w as usize, h as usize);
        if data.len() != w * h * bands {
            return Err(Error::Raster(format!(
                "{}: decoded {} samples, expected {}",
                path.display(),
                data.len(),
                w * h * bands
            )));
        }
        let grid = GridDef::new(
            georef.origin_x,
            georef.origin_y,
            georef.pixel_width,
            h,
            w,
            georef.crs_code,
            district_id,
        )?;
        let decode = |v: f32| if v.is_nan() || v == nodata { f32::NAN } else { v };
        let band = |b: usize| {
            Array2::from_shape_fn((h, w), |(i, j)| decode(data[(i * w + j) * bands + b]))
        };
        let values = band(0);
        let uncertainty = (bands >= 2).then(|| band(1));
        PopulationRaster::new(grid, values, uncertainty, provenance)
    }

    /// Reads a raster and requires it to sit exactly on `grid`.
    pub fn read_aligned(path: &Path, grid: &GridDef) -> Result<Self> {
        let mut r = Self::read_geotiff(path, &grid.district_id)?;
        if !r.grid.is_aligned_with(grid) {
            return Err(Error::Misaligned(format!(
                "{} has origin ({}, {}), cell {} m, {}x{} cells in {}; expected ({}, {}), {} m, {}x{} in {}",
                path.display(),
                r.grid.origin_x,
                r.grid.origin_y,
                r.grid.cell_size,
                r.grid.n_rows,
                r.grid.n_cols,
                r.grid.crs_code,
                grid.origin_x,
                grid.origin_y,
                grid.cell_size,
                grid.n_rows,
                grid.n_cols,
                grid.crs_code
            )));
        }
        r.grid = grid.clone();
        Ok(r)
    }

    /// Per-cell values keyed by tile id, valid cells only.
    pub fn cell_values(&self) -> BTreeMap<String, f64> {
        self.values
            .indexed_iter()
            .filter(|(_, v)| !v.is_nan())
            .map(|((r, c), &v)| (self.grid.tile_id(r, c), f64::from(v)))
            .collect()
    }
}

/// Writes an arbitrary float grid (for example a difference raster) with NaN
/// as the nodata marker.
pub fn write_float_grid(path: &Path, grid: &GridDef, band: &Array2<f64>, description: &str) -> Result<()> {
    if band.dim() != (grid.n_rows, grid.n_cols) {
        return Err(Error::Shape(format!("band is {:?}", band.dim())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file))?;
    let mut img = enc.new_image::<colortype::Gray32Float>(grid.n_cols as u32, grid.n_rows as u32)?;
    let georef = GeoReference {
        origin_x: grid.origin_x,
        origin_y: grid.origin_y,
        pixel_width: grid.cell_size,
        pixel_height: grid.cell_size,
        crs_code: grid.crs_code.clone(),
    };
    georef.write_tags(img.encoder(), Some("nan"))?;
    img.encoder().write_tag(Tag::ImageDescription, description)?;
    let data: Vec<f32> = band.iter().map(|&v| v as f32).collect();
    img.write_data(&data)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridDef {
        GridDef::new(500_000.0, 7_100_000.0, 100.0, 3, 4, "EPSG:32736", "BOA").unwrap()
    }

    #[test]
    fn rejects_negative_and_misshaped() {
        let g = grid();
        assert!(PopulationRaster::new(g.clone(), Array2::from_elem((3, 4), -0.5), None, "x").is_err());
        assert!(PopulationRaster::new(g.clone(), Array2::zeros((4, 3)), None, "x").is_err());
        assert!(PopulationRaster::new(g, Array2::from_elem((3, 4), f32::NAN), None, "x").is_ok());
    }

    #[test]
    fn geotiff_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let mut values = Array2::from_shape_fn((3, 4), |(i, j)| (i as f32 * 1.37 + j as f32).powf(1.3) / 7.0);
        values[[1, 2]] = f32::NAN;
        let unc = values.mapv(|v| v * 0.1 + 0.01);
        for with_unc in [false, true] {
            let r = PopulationRaster::new(g.clone(), values.clone(), with_unc.then(|| unc.clone()), "model:abc").unwrap();
            let path = dir.path().join(format!("m{with_unc}.tif"));
            r.write_geotiff(&path).unwrap();
            let back = PopulationRaster::read_aligned(&path, &g).unwrap();
            assert_eq!(back.provenance, "model:abc");
            for (a, b) in r.values.iter().zip(back.values.iter()) {
                assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
            }
            assert_eq!(back.uncertainty.is_some(), with_unc);
            if let (Some(a), Some(b)) = (&r.uncertainty, &back.uncertainty) {
                assert_eq!(a[[0, 0]].to_bits(), b[[0, 0]].to_bits());
                assert!(b[[1, 2]].is_nan());
            }
        }
    }

    #[test]
    fn misaligned_read_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let r = PopulationRaster::new(g.clone(), Array2::ones((3, 4)), None, "p").unwrap();
        let path = dir.path().join("p.tif");
        r.write_geotiff(&path).unwrap();
        let mut shifted = g.clone();
        shifted.origin_x += 50.0;
        assert!(matches!(PopulationRaster::read_aligned(&path, &shifted), Err(Error::Misaligned(_))));
    }
}
