//! Raster mosaics, per-tile chips, model input preparation and label-safe
//! augmentation.

mod cache;
mod chip;
mod dihedral;
mod geotiff;
mod raster;

pub use cache::{encode_png, ChipCache};
pub use chip::{
    extract_chip, prepare_for_model, resize_bilinear, Chip, ChipSource, NormalizationStats,
    CHIP_SIDE, MODEL_SIDE,
};
pub(crate) use chip::standardize;
pub use dihedral::{apply_dihedral, DihedralTransform};
pub use geotiff::GeoReference;
pub use raster::GeoRaster;
