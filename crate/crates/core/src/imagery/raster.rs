use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array3, ArrayView3};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use super::geotiff::GeoReference;
use crate::error::{Error, Result};

/// An 8-bit RGB mosaic held in memory, rows north to south.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoRaster {
    /// `(row, col, band)`.
    pub pixels: Array3<u8>,
    pub georef: GeoReference,
    /// Value marking missing pixels when all three bands carry it.
    pub nodata: Option<u8>,
}

impl GeoRaster {
    pub fn new(pixels: Array3<u8>, georef: GeoReference, nodata: Option<u8>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Raster(format!(
                "expected 3 bands, found {}",
                pixels.dim().2
            )));
        }
        if !(georef.pixel_width > 0.0 && georef.pixel_height > 0.0) {
            return Err(Error::Raster("pixel size must be positive".into()));
        }
        Ok(GeoRaster {
            pixels,
            georef,
            nodata,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> ArrayView3<'_, u8> {
        self.pixels.slice(s![row0..row0 + rows, col0..col0 + cols, ..])
    }

    /// Reads a striped or tiled 8-bit GeoTIFF with at least three bands; the
    /// first three are taken as RGB.
    pub fn read_geotiff(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = Decoder::new(BufReader::new(file))?;
        let (w, h) = dec.dimensions()?;
        let bands = match dec.colortype()? {
            ColorType::RGB(8) => 3,
            ColorType::RGBA(8) => 4,
            ColorType::Multiband {
                bit_depth: 8,
                num_samples,
            } => usize::from(num_samples),
            ColorType::Gray(8) => 1,
            other => {
                return Err(Error::Raster(format!(
                    "{}: unsupported sample layout {other:?}",
                    path.display()
                )))
            }
        };
        if bands < 3 {
            return Err(Error::Raster(format!(
                "{}: need 3 bands (RGB), found {bands}",
                path.display()
            )));
        }
        let (georef, nodata) = GeoReference::read_tags(&mut dec)?;
        let data = match dec.read_image()? {
            DecodingResult::U8(v) => v,
            _ => return Err(Error::Raster("expected 8-bit samples".into())),
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
        let full = Array3::from_shape_vec((h, w, bands), data)
            .map_err(|e| Error::Raster(e.to_string()))?;
        let pixels = full.slice(s![.., .., 0..3]).to_owned();
        let nodata = nodata.and_then(|s| s.parse::<f64>().ok()).and_then(|v| {
            (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8)
        });
        GeoRaster::new(pixels, georef, nodata)
    }

    /// Writes a striped, uncompressed RGB GeoTIFF.
    pub fn write_geotiff(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = TiffEncoder::new(BufWriter::new(file))?;
        let (h, w, _) = self.pixels.dim();
        let mut img = enc.new_image::<colortype::RGB8>(w as u32, h as u32)?;
        let nodata = self.nodata.map(|v| v.to_string());
        self.georef.write_tags(img.encoder(), nodata.as_deref())?;
        let data: Vec<u8> = self.pixels.iter().copied().collect();
        img.write_data(&data)?;
        Ok(())
    }
}
