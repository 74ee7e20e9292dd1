//! Gridded population estimation from very-high-resolution imagery and sparse
//! household surveys.

pub mod encoder;
pub mod curation;
pub mod error;
pub mod evalx;
pub mod geogrid;
pub mod explain;
pub mod imagery;
pub mod mapgen;
mod nan_as_null;
pub mod pretext;
pub mod pipeline;
pub mod regress;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
