use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geogrid::Tile;
use crate::mapgen::PopulationRaster;
use crate::seed::derive_seed;

/// Draws zero-population proposals per region from reference settlement
/// rasters, one raster per district (the district id is the region).
///
/// Cells qualify when the reference value is exactly 0 and the tile id is not
/// in `skip`. Sampling is uniform without replacement, seeded per region from
/// `seed`. The returned tiles are unlabelled proposals, ordered by region then
/// draw order; they become zero tiles only once a reviewer confirms them.
pub fn sample_zero_candidates(
    references: &[PopulationRaster],
    quotas: &BTreeMap<String, usize>,
    skip: &HashSet<String>,
    seed: u64,
) -> Result<Vec<Tile>> {
    let mut out = Vec::new();
    for (region, &quota) in quotas {
        let reference = references
            .iter()
            .find(|r| &r.grid.district_id == region)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no reference raster for region `{region}`"))
            })?;
        if quota == 0 {
            continue;
        }
        let grid = &reference.grid;
        let zeros: Vec<(usize, usize)> = reference
            .values
            .indexed_iter()
            .filter(|(_, &v)| v == 0.0)
            .map(|(rc, _)| rc)
            .filter(|&(r, c)| !skip.contains(&grid.tile_id(r, c)))
            .collect();
        if zeros.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "reference raster for region `{region}` has no zero cells"
            )));
        }
        if quota > zeros.len() {
            return Err(Error::QuotaExceeded {
                region: region.clone(),
                requested: quota,
                available: zeros.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, region));
        for i in sample(&mut rng, zeros.len(), quota) {
            let (r, c) = zeros[i];
            out.push(Tile::unlabelled(grid, r, c));
        }
    }
    Ok(out)
}
