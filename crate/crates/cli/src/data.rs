use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use popgrid_core::curation::read_decision_log;
use popgrid_core::encoder::{load_encoder, Encoder, EncoderManifest};
use popgrid_core::geogrid::{apply_curation, make_spatial_folds, read_tile_manifest, FoldSpec, GridDef, Tile};
use popgrid_core::imagery::{Chip, ChipCache, ChipSource, GeoRaster};
use serde::Deserialize;

use crate::run::RunContext;

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(GridDef),
    Many(Vec<GridDef>),
}

pub fn grids(ctx: &mut RunContext) -> Result<Vec<GridDef>> {
    if let Some(g) = &ctx.cfg.grid {
        g.validate()?;
        return Ok(vec![g.clone()]);
    }
    let path = ctx.input(ctx.cfg.paths.state_dir.join("grids.json"));
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let grids = match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        OneOrMany::One(g) => vec![g],
        OneOrMany::Many(v) => v,
    };
    for g in &grids {
        g.validate()?;
    }
    Ok(grids)
}

/// The grid of the configured district, or the only grid.
pub fn grid(ctx: &mut RunContext) -> Result<GridDef> {
    let district = ctx.cfg.district.clone();
    let all = grids(ctx)?;
    match district {
        Some(d) => all
            .into_iter()
            .find(|g| g.district_id == d)
            .ok_or_else(|| anyhow!("no grid for district `{d}`")),
        None if all.len() == 1 => Ok(all.into_iter().next().expect("one grid")),
        None => bail!("{} grids defined; choose one with `district`", all.len()),
    }
}

/// Tile manifest with the curation log, if any, applied.
pub fn tiles(ctx: &mut RunContext) -> Result<Vec<Tile>> {
    let path = ctx
        .cfg
        .paths
        .tiles
        .clone()
        .unwrap_or_else(|| ctx.cfg.paths.state_dir.join("tiles.jsonl"));
    let path = ctx.input(path);
    let manifest = read_tile_manifest(&path).with_context(|| format!("reading {}", path.display()))?;
    let log_path = ctx.cfg.paths.state_dir.join("decisions.jsonl");
    if !log_path.exists() {
        return Ok(manifest);
    }
    let log = read_decision_log(&ctx.input(log_path))?;
    let mut all = manifest;
    let known: std::collections::HashSet<String> = all.iter().map(|t| t.tile_id.clone()).collect();
    let grids = grids(ctx)?;
    for d in &log {
        if known.contains(&d.tile_id) || all.iter().any(|t| t.tile_id == d.tile_id) {
            continue;
        }
        if let Some(t) = cell_tile(&grids, &d.tile_id) {
            all.push(t);
        }
    }
    Ok(apply_curation(&all, &log)?)
}

fn cell_tile(grids: &[GridDef], id: &str) -> Option<Tile> {
    let mut parts = id.rsplitn(3, ':');
    let col = parts.next()?.parse().ok()?;
    let row = parts.next()?.parse().ok()?;
    let g = grids.iter().find(|g| g.district_id == parts.next().unwrap_or_default())?;
    g.contains_cell(row, col).then(|| Tile::unlabelled(g, row, col))
}

/// Tiles used as training labels.
pub fn labelled(ctx: &RunContext, tiles: &[Tile]) -> Vec<Tile> {
    tiles
        .iter()
        .filter(|t| ctx.cfg.training_statuses.contains(&t.status) && t.label().is_some())
        .cloned()
        .collect()
}

/// Chip cache first, then the mosaic.
pub struct Chips {
    cache: Option<ChipCache>,
    mosaic: Option<GeoRaster>,
}

impl ChipSource for Chips {
    fn chip(&self, tile: &Tile, grid: &GridDef) -> popgrid_core::Result<Chip> {
        if let Some(c) = &self.cache {
            if c.contains(&tile.tile_id) {
                return c.get(&tile.tile_id);
            }
        }
        match &self.mosaic {
            Some(m) => m.chip(tile, grid),
            None => Err(popgrid_core::Error::ChipWindow {
                tile_id: tile.tile_id.clone(),
                reason: "not in the chip cache and no imagery configured".into(),
            }),
        }
    }
}

pub fn chips(ctx: &mut RunContext) -> Result<Chips> {
    let cache_dir = ctx.cfg.paths.state_dir.join("chips");
    let cache = cache_dir.is_dir().then(|| ChipCache::open(cache_dir)).transpose()?;
    let mosaic = match ctx.cfg.paths.imagery.clone() {
        Some(p) => {
            let p = ctx.input(p);
            Some(GeoRaster::read_geotiff(&p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    Ok(Chips { cache, mosaic })
}

/// Chips for `tiles`, in order.
pub fn chips_for(ctx: &mut RunContext, tiles: &[Tile]) -> Result<Vec<Chip>> {
    let source = chips(ctx)?;
    let grids = grids(ctx)?;
    tiles
        .iter()
        .map(|t| {
            let g = grids
                .iter()
                .find(|g| g.district_id == t.district_id())
                .ok_or_else(|| anyhow!("tile `{}` belongs to no configured grid", t.tile_id))?;
            Ok(source.chip(t, g)?)
        })
        .collect()
}

pub fn encoder(ctx: &mut RunContext) -> Result<Encoder> {
    match ctx.cfg.paths.encoder.clone() {
        Some(p) => {
            let p = ctx.input(p);
            let manifest = EncoderManifest::read_json(&p).with_context(|| format!("reading {}", p.display()))?;
            if let Some(w) = &manifest.weights_uri {
                ctx.input(w.clone());
            }
            Ok(load_encoder(&manifest)?)
        }
        None => Ok(load_encoder(&EncoderManifest::tiny(ctx.cfg.scratch_encoder_seed))?),
    }
}

/// Configured fold file, or spatial folds written to the outputs.
pub fn folds(ctx: &mut RunContext, tiles: &[Tile]) -> Result<FoldSpec> {
    match ctx.cfg.paths.folds.clone() {
        Some(p) => {
            let p = ctx.input(p);
            Ok(FoldSpec::read_json(&p).with_context(|| format!("reading fold file {}", p.display()))?)
        }
        None => {
            let spec = make_spatial_folds(tiles, ctx.cfg.n_folds)?;
            let out = ctx.output("folds.json");
            spec.write_json(&out)?;
            Ok(spec)
        }
    }
}

pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| anyhow!("no {what} configured (set paths.{what})"))
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}
