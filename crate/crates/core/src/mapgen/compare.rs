use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::PopulationRaster;
use crate::error::{Error, Result};
use crate::evalx::stats::{pearson, spearman};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductComparison {
    #[serde(with = "crate::nan_as_null")]
    pub spearman: f64,
    #[serde(with = "crate::nan_as_null")]
    pub pearson: f64,
    /// Cells valid in both rasters.
    pub n_cells: usize,
    pub total_ours: f64,
    pub total_theirs: f64,
    /// `|Σours − Σtheirs| / Σtheirs` over the common cells.
    #[serde(with = "crate::nan_as_null")]
    pub aggregate_pct_error: f64,
    /// `ours − theirs`, NaN outside the common cells.
    #[serde(skip)]
    pub difference: Array2<f64>,
}

/// Correlates two products on the same grid over the cells both define.
///
/// A correlation is NaN when either side is constant over the common cells.
pub fn compare_products(ours: &PopulationRaster, theirs: &PopulationRaster) -> Result<ProductComparison> {
    if !ours.grid.is_aligned_with(&theirs.grid) {
        return Err(Error::Misaligned(format!(
            "`{}` and `{}` are on different grids; resample one onto the other first",
            ours.provenance, theirs.provenance
        )));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let difference = Array2::from_shape_fn(ours.values.dim(), |(r, c)| {
        let (x, y) = (ours.values[[r, c]], theirs.values[[r, c]]);
        if x.is_nan() || y.is_nan() {
            f64::NAN
        } else {
            a.push(f64::from(x));
            b.push(f64::from(y));
            f64::from(x) - f64::from(y)
        }
    });
    if a.is_empty() {
        return Err(Error::InvalidArgument(
            "the rasters share no cell with a value in both".into(),
        ));
    }
    let total_ours: f64 = a.iter().sum();
    let total_theirs: f64 = b.iter().sum();
    let aggregate_pct_error = if total_theirs > 0.0 {
        (total_ours - total_theirs).abs() / total_theirs
    } else {
        f64::NAN
    };
    Ok(ProductComparison {
        spearman: spearman(&a, &b).unwrap_or(f64::NAN),
        pearson: pearson(&a, &b).unwrap_or(f64::NAN),
        n_cells: a.len(),
        total_ours,
        total_theirs,
        aggregate_pct_error,
        difference,
    })
}

/// Signed relative difference of the raster total from a census projection.
pub fn census_check(raster: &PopulationRaster, projected_total: f64) -> Result<f64> {
    if !(projected_total.is_finite() && projected_total > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "projected total must be positive, got {projected_total}"
        )));
    }
    Ok((raster.total() - projected_total) / projected_total)
}

/// Reads `{district_id: projected_total}`.
pub fn read_census_totals(path: &Path) -> Result<BTreeMap<String, f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let totals: BTreeMap<String, f64> = serde_json::from_reader(BufReader::new(file))?;
    if let Some((d, v)) = totals.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidArgument(format!("census total for `{d}` is {v}")));
    }
    Ok(totals)
}
