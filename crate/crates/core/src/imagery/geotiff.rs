//! Minimal GeoTIFF georeferencing: pixel scale, a single tie point, the projected
//! CRS key and the GDAL nodata tag. Rasters are north-up with square-or-not
//! pixels and no rotation.

use std::io::{Read, Seek, Write};

use tiff::decoder::Decoder;
use tiff::encoder::{DirectoryEncoder, TiffKind};
use tiff::tags::Tag;

use crate::error::{Error, Result};
use crate::geogrid::normalize_crs;

const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GEOGRAPHIC_TYPE: u16 = 2048;
const PROJECTED_CS_TYPE: u16 = 3072;
const MODEL_TYPE_PROJECTED: u16 = 1;
const RASTER_PIXEL_IS_AREA: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GeoReference {
    /// Map coordinates of the outer corner of pixel (0, 0).
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
    pub crs_code: String,
}

impl GeoReference {
    pub fn epsg(&self) -> Result<u16> {
        let norm = normalize_crs(&self.crs_code);
        norm.strip_prefix("EPSG:")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Raster(format!("CRS `{}` has no EPSG code", self.crs_code)))
    }

    pub(crate) fn write_tags<W: Write + Seek, K: TiffKind>(
        &self,
        dir: &mut DirectoryEncoder<'_, W, K>,
        nodata: Option<&str>,
    ) -> Result<()> {
        let epsg = self.epsg()?;
        dir.write_tag(
            Tag::ModelPixelScaleTag,
            &[self.pixel_width, self.pixel_height, 0.0][..],
        )?;
        dir.write_tag(
            Tag::ModelTiepointTag,
            &[0.0, 0.0, 0.0, self.origin_x, self.origin_y, 0.0][..],
        )?;
        let keys: [u16; 16] = [
            1, 1, 0, 3,
            GT_MODEL_TYPE, 0, 1, MODEL_TYPE_PROJECTED,
            GT_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA,
            PROJECTED_CS_TYPE, 0, 1, epsg,
        ];
        dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])?;
        if let Some(nd) = nodata {
            dir.write_tag(Tag::GdalNodata, nd)?;
        }
        Ok(())
    }

    pub(crate) fn read_tags<R: Read + Seek>(dec: &mut Decoder<R>) -> Result<(Self, Option<String>)> {
        let scale = dec
            .find_tag(Tag::ModelPixelScaleTag)?
            .ok_or_else(|| Error::Raster("missing ModelPixelScale tag".into()))?
            .into_f64_vec()?;
        let tie = dec
            .find_tag(Tag::ModelTiepointTag)?
            .ok_or_else(|| Error::Raster("missing ModelTiepoint tag".into()))?
            .into_f64_vec()?;
        if scale.len() < 2 || tie.len() < 6 {
            return Err(Error::Raster("malformed georeferencing tags".into()));
        }
        let keys = dec
            .find_tag(Tag::GeoKeyDirectoryTag)?
            .map(|v| v.into_u16_vec())
            .transpose()?
            .unwrap_or_default();
        let mut crs = None;
        for k in keys.get(4..).unwrap_or_default().chunks_exact(4) {
            if (k[0] == PROJECTED_CS_TYPE || k[0] == GEOGRAPHIC_TYPE) && k[1] == 0 {
                crs = Some(format!("EPSG:{}", k[3]));
                if k[0] == PROJECTED_CS_TYPE {
                    break;
                }
            }
        }
        let nodata = dec
            .find_tag(Tag::GdalNodata)?
            .map(|v| v.into_string())
            .transpose()?
            .map(|s| s.trim_end_matches('\0').trim().to_string());
        let georef = GeoReference {
            origin_x: tie[3] - tie[0] * scale[0],
            origin_y: tie[4] + tie[1] * scale[1],
            pixel_width: scale[0],
            pixel_height: scale[1],
            crs_code: crs.ok_or_else(|| Error::Raster("no EPSG code in GeoKeyDirectory".into()))?,
        };
        Ok((georef, nodata))
    }
}
