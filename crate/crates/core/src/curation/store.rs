use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{
    apply_curation, read_microcensus_csv, read_tile_manifest, CurationDecision, Decision, GridDef,
    Tile, TileStatus,
};
use crate::imagery::{encode_png, ChipCache, CHIP_SIDE};
use crate::mapgen::PopulationRaster;

use super::sample_zero_candidates;

const GRIDS: &str = "grids.json";
const TILES: &str = "tiles.jsonl";
const CHIPS: &str = "chips";
const REFERENCE: &str = "reference";
const MICROCENSUS: &str = "microcensus.csv";
const LOG: &str = "decisions.jsonl";
const SNAPSHOT: &str = "snapshot.json";

const THUMB_RADIUS: usize = 5;
const THUMB_CELL_PX: usize = 16;

/// Surveyed household inside a tile, with its position in chip pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyPoint {
    pub x: f64,
    pub y: f64,
    pub px: f64,
    pub py: f64,
    pub household_size: u32,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    log_len: usize,
    counts: BTreeMap<TileStatus, usize>,
    tiles: Vec<Tile>,
}

/// Curation state held in one directory:
///
/// | path | content |
/// |------|---------|
/// | `grids.json` | analysis grids (one object or an array) |
/// | `tiles.jsonl` | tile manifest before curation |
/// | `chips/` | chip cache |
/// | `reference/<district>.tif` | optional settlement reference rasters |
/// | `microcensus.csv` | optional household points, in the grids' CRS |
/// | `decisions.jsonl` | append-only decision log |
/// | `snapshot.json` | statuses derived from the log, rewritten after each decision |
///
/// Opening replays the log over the manifest; anything unreadable or
/// inconsistent refuses to open.
pub struct CurationStore {
    dir: PathBuf,
    grids: Vec<GridDef>,
    manifest: Vec<Tile>,
    tiles: Vec<Tile>,
    index: HashMap<String, usize>,
    log: Vec<CurationDecision>,
    log_file: File,
    last_timestamp: Option<DateTime<Utc>>,
    survey: HashMap<String, Vec<SurveyPoint>>,
    references: Vec<PopulationRaster>,
    chips: ChipCache,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptState {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_grids(path: &Path) -> Result<Vec<GridDef>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(GridDef),
        Many(Vec<GridDef>),
    }
    let grids = match serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))? {
        OneOrMany::One(g) => vec![g],
        OneOrMany::Many(v) => v,
    };
    if grids.is_empty() {
        return Err(corrupt(path, "no grid defined"));
    }
    let mut seen = HashSet::new();
    for g in &grids {
        g.validate().map_err(|e| corrupt(path, e.to_string()))?;
        if !seen.insert(g.district_id.as_str()) {
            return Err(corrupt(path, format!("district `{}` defined twice", g.district_id)));
        }
    }
    Ok(grids)
}

/// Reads a decision log; a missing file is an empty log.
pub fn read_decision_log(path: &Path) -> Result<Vec<CurationDecision>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: CurationDecision = serde_json::from_str(&line)
            .map_err(|e| corrupt(path, format!("line {}: {e}", i + 1)))?;
        out.push(d);
    }
    Ok(out)
}

impl CurationStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let grids = read_grids(&dir.join(GRIDS))?;
        let tiles_path = dir.join(TILES);
        let manifest = read_tile_manifest(&tiles_path).map_err(|e| match e {
            Error::Io { .. } | Error::CorruptState { .. } => e,
            other => corrupt(&tiles_path, other.to_string()),
        })?;
        for t in &manifest {
            let known = grids.iter().any(|g| {
                g.district_id == t.district_id() && g.contains_cell(t.row, t.col) && g.tile_id(t.row, t.col) == t.tile_id
            });
            if !known {
                return Err(corrupt(&tiles_path, format!("tile `{}` is not a cell of any grid", t.tile_id)));
            }
        }

        let mut references = Vec::new();
        for g in &grids {
            let path = dir.join(REFERENCE).join(format!("{}.tif", g.district_id));
            if path.exists() {
                references.push(
                    PopulationRaster::read_aligned(&path, g).map_err(|e| corrupt(&path, e.to_string()))?,
                );
            }
        }

        let mut survey: HashMap<String, Vec<SurveyPoint>> = HashMap::new();
        let mc_path = dir.join(MICROCENSUS);
        if mc_path.exists() {
            let records = read_microcensus_csv(&mc_path).map_err(|e| corrupt(&mc_path, e.to_string()))?;
            for rec in records {
                let Some((g, (r, c))) = grids.iter().find_map(|g| g.cell_of(rec.x, rec.y).map(|rc| (g, rc))) else {
                    continue;
                };
                let b = g.cell_bounds(r, c);
                let scale = CHIP_SIDE as f64 / g.cell_size;
                survey.entry(g.tile_id(r, c)).or_default().push(SurveyPoint {
                    x: rec.x,
                    y: rec.y,
                    px: (rec.x - b.min_x) * scale,
                    py: (b.max_y - rec.y) * scale,
                    household_size: rec.household_size,
                });
            }
        }

        let log_path = dir.join(LOG);
        let log = read_decision_log(&log_path)?;
        let chips = ChipCache::open(dir.join(CHIPS))?;
        let log_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        let mut store = CurationStore {
            dir,
            grids,
            manifest: manifest.clone(),
            tiles: manifest,
            index: HashMap::new(),
            log: Vec::new(),
            log_file,
            last_timestamp: None,
            survey,
            references,
            chips,
        };
        store.reindex();
        for d in &log {
            store.materialize(&d.tile_id);
        }
        store.tiles = apply_curation(&store.manifest, &log).map_err(|e| corrupt(&log_path, e.to_string()))?;
        store.last_timestamp = log.iter().map(|d| d.timestamp).max();
        store.log = log;
        store.write_snapshot()?;
        Ok(store)
    }

    fn reindex(&mut self) {
        self.index = self
            .tiles
            .iter()
            .enumerate()
            .map(|(i, t)| (t.tile_id.clone(), i))
            .collect();
    }

    /// Adds an unlabelled tile for an id naming a grid cell that is not yet in
    /// the manifest, so that zero proposals can be confirmed.
    fn materialize(&mut self, tile_id: &str) -> bool {
        if self.index.contains_key(tile_id) {
            return true;
        }
        let Some(tile) = self.parse_cell(tile_id) else {
            return false;
        };
        self.index.insert(tile.tile_id.clone(), self.tiles.len());
        self.manifest.push(tile.clone());
        self.tiles.push(tile);
        true
    }

    fn parse_cell(&self, tile_id: &str) -> Option<Tile> {
        let mut parts = tile_id.rsplitn(3, ':');
        let col: usize = parts.next()?.parse().ok()?;
        let row: usize = parts.next()?.parse().ok()?;
        let district = parts.next()?;
        let grid = self.grids.iter().find(|g| g.district_id == district)?;
        (grid.contains_cell(row, col) && grid.tile_id(row, col) == tile_id).then(|| Tile::unlabelled(grid, row, col))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn grids(&self) -> &[GridDef] {
        &self.grids
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn tile(&self, tile_id: &str) -> Option<&Tile> {
        self.index.get(tile_id).map(|&i| &self.tiles[i])
    }

    /// Known tile, or an unlabelled one for a valid cell id not yet decided.
    pub fn tile_or_cell(&self, tile_id: &str) -> Option<Tile> {
        self.tile(tile_id).cloned().or_else(|| self.parse_cell(tile_id))
    }

    pub fn log(&self) -> &[CurationDecision] {
        &self.log
    }

    pub fn history(&self, tile_id: &str) -> Vec<&CurationDecision> {
        self.log.iter().filter(|d| d.tile_id == tile_id).collect()
    }

    pub fn survey_points(&self, tile_id: &str) -> &[SurveyPoint] {
        self.survey.get(tile_id).map(Vec::as_slice).unwrap_or_default()
    }

    /// Tile counts per status; every status is present, and the counts sum to
    /// the number of tiles.
    pub fn counts(&self) -> BTreeMap<TileStatus, usize> {
        let mut counts: BTreeMap<TileStatus, usize> = TileStatus::ALL.iter().map(|&s| (s, 0)).collect();
        for t in &self.tiles {
            *counts.entry(t.status).or_default() += 1;
        }
        counts
    }

    /// Validates, appends to the log and applies one decision.
    ///
    /// The timestamp is the current time, bumped by a microsecond when needed
    /// so that timestamps in the log are strictly increasing.
    pub fn decide(
        &mut self,
        tile_id: &str,
        decision: Decision,
        annotator: &str,
        note: Option<String>,
    ) -> Result<Tile> {
        if annotator.trim().is_empty() {
            return Err(Error::InvalidArgument("annotator must not be empty".into()));
        }
        let base = match self.index.get(tile_id) {
            Some(&i) => self.manifest[i].clone(),
            None => self
                .parse_cell(tile_id)
                .ok_or_else(|| Error::UnknownTile(tile_id.to_string()))?,
        };
        let mut timestamp = Utc::now();
        if let Some(last) = self.last_timestamp {
            if timestamp <= last {
                timestamp = last + Duration::microseconds(1);
            }
        }
        let record = CurationDecision {
            tile_id: tile_id.to_string(),
            decision,
            annotator: annotator.to_string(),
            timestamp,
            note,
        };
        let updated = apply_curation(std::slice::from_ref(&base), std::slice::from_ref(&record))?
            .pop()
            .expect("one tile in, one tile out");

        let log_path = self.dir.join(LOG);
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.log_file
            .write_all(&line)
            .and_then(|_| self.log_file.sync_data())
            .map_err(|e| Error::io(&log_path, e))?;

        self.materialize(tile_id);
        let i = self.index[tile_id];
        self.tiles[i] = updated.clone();
        self.log.push(record);
        self.last_timestamp = Some(timestamp);
        self.write_snapshot()?;
        Ok(updated)
    }

    fn write_snapshot(&self) -> Result<()> {
        let path = self.dir.join(SNAPSHOT);
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        let snap = Snapshot {
            log_len: self.log.len(),
            counts: self.counts(),
            tiles: self.tiles.clone(),
        };
        fs::write(&tmp, serde_json::to_vec_pretty(&snap)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Zero proposals from the reference rasters, skipping surveyed tiles and
    /// tiles already confirmed as zero.
    pub fn zero_candidates(&self, quotas: &BTreeMap<String, usize>, seed: u64) -> Result<Vec<Tile>> {
        let skip: HashSet<String> = self
            .tiles
            .iter()
            .filter(|t| t.status != TileStatus::Unlabelled)
            .map(|t| t.tile_id.clone())
            .collect();
        sample_zero_candidates(&self.references, quotas, &skip, seed)
    }

    pub fn chip_png(&self, tile_id: &str) -> Result<Vec<u8>> {
        let path = self.chips.png_path(tile_id);
        if self.tile_or_cell(tile_id).is_none() {
            return Err(Error::UnknownTile(tile_id.to_string()));
        }
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    /// Reference-layer neighbourhood of a tile: 11×11 cells centred on it,
    /// brighter for larger values, blue for nodata, outside the grid black,
    /// and the tile itself framed in red.
    pub fn reference_png(&self, tile_id: &str) -> Result<Vec<u8>> {
        let tile = self
            .tile_or_cell(tile_id)
            .ok_or_else(|| Error::UnknownTile(tile_id.to_string()))?;
        let reference = self
            .references
            .iter()
            .find(|r| r.grid.district_id == tile.district_id())
            .ok_or_else(|| Error::InvalidArgument(format!("no reference raster for `{}`", tile.district_id())))?;
        let max = reference
            .values
            .iter()
            .filter(|v| !v.is_nan())
            .fold(0.0f32, |a, &b| a.max(b));
        let cells = 2 * THUMB_RADIUS + 1;
        let side = cells * THUMB_CELL_PX;
        let px = Array3::from_shape_fn((side, side, 3), |(i, j, c)| {
            let (ci, cj) = (i / THUMB_CELL_PX, j / THUMB_CELL_PX);
            let (ii, jj) = (i % THUMB_CELL_PX, j % THUMB_CELL_PX);
            let edge = ii == 0 || jj == 0 || ii == THUMB_CELL_PX - 1 || jj == THUMB_CELL_PX - 1;
            if ci == THUMB_RADIUS && cj == THUMB_RADIUS && edge {
                return [255, 0, 0][c];
            }
            let r = (tile.row + ci).checked_sub(THUMB_RADIUS);
            let k = (tile.col + cj).checked_sub(THUMB_RADIUS);
            match (r, k) {
                (Some(r), Some(k)) if reference.grid.contains_cell(r, k) => {
                    let v = reference.values[[r, k]];
                    if v.is_nan() {
                        [40, 60, 160][c]
                    } else if max > 0.0 {
                        (255.0 * (v / max).sqrt()).round() as u8
                    } else {
                        0
                    }
                }
                _ => 0,
            }
        });
        encode_png(&px)
    }
}
