//! Analysis grid, microcensus aggregation, tile curation state and spatial folds.
//!
//! Every tile is a half-open box: closed on its western and southern edges, open on
//! the eastern and northern ones. Rows count southwards from the grid origin, which
//! is the north-west corner of the extent.

mod curation;
mod folds;
mod microcensus;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use curation::{apply_curation, CurationDecision, Decision};
pub use folds::{hilbert_index, make_spatial_folds, FoldSpec};
pub use microcensus::{
    aggregate_microcensus, read_microcensus_csv, read_microcensus_geojson, Aggregation,
    MicrocensusRecord, RejectedRecord,
};

fn default_cell_size() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDef {
    pub origin_x: f64,
    pub origin_y: f64,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub crs_code: String,
    pub district_id: String,
}

/// Axis-aligned bounds of one cell, `[min_x, max_x) x [min_y, max_y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellBounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl GridDef {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        crs_code: impl Into<String>,
        district_id: impl Into<String>,
    ) -> Result<Self> {
        let grid = GridDef {
            origin_x,
            origin_y,
            cell_size,
            n_rows,
            n_cols,
            crs_code: crs_code.into(),
            district_id: district_id.into(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::InvalidGrid("grid needs at least one row and one column".into()));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        if self.district_id.contains(':') {
            return Err(Error::InvalidGrid("district_id must not contain ':'".into()));
        }
        if normalize_crs(&self.crs_code).is_empty() {
            return Err(Error::InvalidGrid("crs_code is empty".into()));
        }
        Ok(())
    }

    /// Cell containing the point, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let col = ((x - self.origin_x) / self.cell_size).floor();
        // Row r spans [origin_y - (r+1)s, origin_y - r s): the northern edge is open.
        let row = -((y - self.origin_y) / self.cell_size).floor() - 1.0;
        if col < 0.0 || row < 0.0 || col >= self.n_cols as f64 || row >= self.n_rows as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    pub fn cell_bounds(&self, row: usize, col: usize) -> CellBounds {
        let s = self.cell_size;
        CellBounds {
            min_x: self.origin_x + col as f64 * s,
            max_x: self.origin_x + (col + 1) as f64 * s,
            min_y: self.origin_y - (row + 1) as f64 * s,
            max_y: self.origin_y - row as f64 * s,
        }
    }

    pub fn centroid(&self, row: usize, col: usize) -> (f64, f64) {
        let b = self.cell_bounds(row, col);
        ((b.min_x + b.max_x) / 2.0, (b.min_y + b.max_y) / 2.0)
    }

    pub fn extent(&self) -> CellBounds {
        CellBounds {
            min_x: self.origin_x,
            max_x: self.origin_x + self.n_cols as f64 * self.cell_size,
            min_y: self.origin_y - self.n_rows as f64 * self.cell_size,
            max_y: self.origin_y,
        }
    }

    pub fn tile_id(&self, row: usize, col: usize) -> String {
        format!("{}:{}:{}", self.district_id, row, col)
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        row < self.n_rows && col < self.n_cols
    }

    /// Same origin, cell size, shape and CRS.
    pub fn is_aligned_with(&self, other: &GridDef) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
            && self.cell_size == other.cell_size
            && crs_equal(&self.crs_code, &other.crs_code)
    }

    pub fn check_crs(&self, found: &str) -> Result<()> {
        if crs_equal(&self.crs_code, found) {
            Ok(())
        } else {
            Err(Error::CrsMismatch {
                expected: self.crs_code.clone(),
                found: found.to_string(),
            })
        }
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let grid: GridDef = serde_json::from_reader(BufReader::new(file))?;
        grid.validate()?;
        Ok(grid)
    }
}

/// Canonical `EPSG:<code>` form where an EPSG code can be recognised.
pub fn normalize_crs(code: &str) -> String {
    let trimmed = code.trim();
    let upper = trimmed.to_ascii_uppercase();
    if upper.contains("EPSG") {
        let digits: String = upper
            .rsplit(|c: char| !c.is_ascii_digit())
            .find(|s| !s.is_empty())
            .unwrap_or_default()
            .to_string();
        if !digits.is_empty() {
            return format!("EPSG:{digits}");
        }
    }
    if !upper.is_empty() && upper.chars().all(|c| c.is_ascii_digit()) {
        return format!("EPSG:{upper}");
    }
    upper
}

pub fn crs_equal(a: &str, b: &str) -> bool {
    normalize_crs(a) == normalize_crs(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileStatus {
    Unlabelled,
    Surveyed,
    Curated,
    Excluded,
    Zero,
}

impl TileStatus {
    pub const ALL: [TileStatus; 5] = [
        TileStatus::Unlabelled,
        TileStatus::Surveyed,
        TileStatus::Curated,
        TileStatus::Excluded,
        TileStatus::Zero,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TileStatus::Unlabelled => "unlabelled",
            TileStatus::Surveyed => "surveyed",
            TileStatus::Curated => "curated",
            TileStatus::Excluded => "excluded",
            TileStatus::Zero => "zero",
        }
    }

    /// Tiles that carry a survey count, whatever the curation outcome.
    pub fn has_survey(self) -> bool {
        matches!(
            self,
            TileStatus::Surveyed | TileStatus::Curated | TileStatus::Excluded
        )
    }
}

impl fmt::Display for TileStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TileStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TileStatus::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tile status `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tile {
    pub tile_id: String,
    pub row: usize,
    pub col: usize,
    pub population: Option<f64>,
    pub status: TileStatus,
    pub region_key: String,
}

impl Tile {
    pub fn unlabelled(grid: &GridDef, row: usize, col: usize) -> Self {
        Tile {
            tile_id: grid.tile_id(row, col),
            row,
            col,
            population: None,
            status: TileStatus::Unlabelled,
            region_key: grid.district_id.clone(),
        }
    }

    /// District part of `district:row:col`.
    pub fn district_id(&self) -> &str {
        self.tile_id
            .rsplitn(3, ':')
            .nth(2)
            .unwrap_or(self.tile_id.as_str())
    }

    /// Population for training and evaluation: present and not excluded.
    pub fn label(&self) -> Option<f64> {
        match self.status {
            TileStatus::Excluded => None,
            _ => self.population,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidArgument(format!(
                "tile `{}`: {reason}",
                self.tile_id
            )))
        };
        if let Some(p) = self.population {
            if !(p.is_finite() && p >= 0.0) {
                return bad("population must be finite and non-negative");
            }
        }
        match self.status {
            TileStatus::Zero if self.population != Some(0.0) => bad("zero tiles carry population 0"),
            TileStatus::Curated | TileStatus::Surveyed if self.population.is_none() => {
                bad("surveyed and curated tiles need a population")
            }
            _ => Ok(()),
        }
    }
}

/// Reads a JSON-lines tile manifest, rejecting duplicate ids.
pub fn read_tile_manifest(path: &Path) -> Result<Vec<Tile>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tiles = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tile: Tile = serde_json::from_str(&line).map_err(|e| Error::CorruptState {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        tile.validate()?;
        if !seen.insert(tile.tile_id.clone()) {
            return Err(Error::DuplicateTile(tile.tile_id));
        }
        tiles.push(tile);
    }
    Ok(tiles)
}

pub fn write_tile_manifest(path: &Path, tiles: &[Tile]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for tile in tiles {
        serde_json::to_writer(&mut w, tile)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridDef {
        GridDef::new(1000.0, 5000.0, 100.0, 3, 4, "EPSG:32736", "BOA").unwrap()
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(GridDef::new(0.0, 0.0, 0.0, 1, 1, "EPSG:1", "d").is_err());
        assert!(GridDef::new(0.0, 0.0, 10.0, 0, 1, "EPSG:1", "d").is_err());
        assert!(GridDef::new(0.0, 0.0, 10.0, 1, 0, "EPSG:1", "d").is_err());
    }

    #[test]
    fn half_open_cells() {
        let g = grid();
        assert_eq!(g.cell_of(1000.0, 4999.0), Some((0, 0)));
        // western edge closed, eastern edge open
        assert_eq!(g.cell_of(1100.0, 4950.0), Some((0, 1)));
        // the southern edge of row 0 is closed, so it does not belong to row 1
        assert_eq!(g.cell_of(1050.0, 4900.0), Some((0, 0)));
        assert_eq!(g.cell_of(1050.0, 4899.999), Some((1, 0)));
        assert_eq!(g.cell_of(1050.0, 5000.0), None);
        assert_eq!(g.cell_of(1400.0, 4950.0), None);
        assert_eq!(g.cell_of(999.999, 4950.0), None);
        assert_eq!(g.cell_of(1399.999, 4700.0), Some((2, 3)));
    }

    #[test]
    fn bounds_roundtrip_through_cell_of() {
        let g = grid();
        for r in 0..g.n_rows {
            for c in 0..g.n_cols {
                let b = g.cell_bounds(r, c);
                assert_eq!(g.cell_of(b.min_x, b.min_y), Some((r, c)));
                let (cx, cy) = g.centroid(r, c);
                assert_eq!(g.cell_of(cx, cy), Some((r, c)));
            }
        }
    }

    #[test]
    fn crs_normalization() {
        assert!(crs_equal("EPSG:32736", "epsg:32736"));
        assert!(crs_equal("urn:ogc:def:crs:EPSG::32736", "EPSG:32736"));
        assert!(crs_equal("32736", "EPSG:32736"));
        assert!(!crs_equal("EPSG:32736", "EPSG:4326"));
    }

    #[test]
    fn tile_invariants() {
        let g = grid();
        let mut t = Tile::unlabelled(&g, 1, 2);
        assert_eq!(t.tile_id, "BOA:1:2");
        assert_eq!(t.district_id(), "BOA");
        t.validate().unwrap();
        t.status = TileStatus::Zero;
        assert!(t.validate().is_err());
        t.population = Some(0.0);
        t.validate().unwrap();
        t.status = TileStatus::Curated;
        t.population = None;
        assert!(t.validate().is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiles.jsonl");
        let g = grid();
        let mut a = Tile::unlabelled(&g, 0, 0);
        a.population = Some(12.0);
        a.status = TileStatus::Surveyed;
        let b = Tile::unlabelled(&g, 2, 3);
        write_tile_manifest(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_tile_manifest(&path).unwrap(), vec![a.clone(), b]);

        write_tile_manifest(&path, &[a.clone(), a]).unwrap();
        assert!(matches!(
            read_tile_manifest(&path),
            Err(Error::DuplicateTile(_))
        ));
    }
}
