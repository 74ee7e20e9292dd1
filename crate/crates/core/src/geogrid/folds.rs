use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::Tile;
use crate::error::{Error, Result};

/// Assignment of labelled tiles to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    n_folds: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldSpec {
    pub fn new(n_folds: usize, assignment: BTreeMap<String, usize>) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::InvalidFolds(format!("need at least 2 folds, got {n_folds}")));
        }
        if let Some((id, f)) = assignment.iter().find(|(_, &f)| f >= n_folds) {
            return Err(Error::InvalidFolds(format!(
                "tile `{id}` assigned to fold {f}, but only {n_folds} folds exist"
            )));
        }
        Ok(FoldSpec { n_folds, assignment })
    }

    /// Builds a spec from raw `(tile_id, fold)` pairs, as found in a fold file.
    /// A tile listed twice is a leakage error even when both entries agree.
    pub fn from_entries(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (id, fold) in entries {
            if let Some(prev) = assignment.insert(id.clone(), fold) {
                return Err(Error::Leakage(format!(
                    "tile `{id}` is listed in fold {prev} and fold {fold}"
                )));
            }
        }
        let n_folds = assignment.values().max().map_or(0, |m| m + 1);
        FoldSpec::new(n_folds, assignment)
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn fold_of(&self, tile_id: &str) -> Option<usize> {
        self.assignment.get(tile_id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Checks that the spec covers exactly the given tile ids.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut seen = HashSet::new();
        for id in ids {
            if !seen.insert(id) {
                return Err(Error::Leakage(format!("tile `{id}` appears more than once")));
            }
            if !self.assignment.contains_key(id) {
                return Err(Error::InvalidFolds(format!("tile `{id}` has no fold")));
            }
        }
        if let Some(extra) = self.assignment.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::InvalidFolds(format!(
                "fold file names tile `{extra}`, which is not in the labelled set"
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let entries: FoldEntries = serde_json::from_str(s)?;
        FoldSpec::from_entries(entries.0)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries: FoldEntries = serde_json::from_reader(BufReader::new(file))?;
        FoldSpec::from_entries(entries.0)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.assignment)?;
        Ok(())
    }
}

impl Serialize for FoldSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.assignment.serialize(s)
    }
}

/// JSON object read entry by entry so duplicate keys survive to validation.
struct FoldEntries(Vec<(String, usize)>);

impl<'de> Deserialize<'de> for FoldEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = FoldEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping tile ids to fold indices")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<FoldEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, usize>()? {
                    out.push((k, v));
                }
                Ok(FoldEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Position of `(x, y)` along a Hilbert curve filling a `side x side` square;
/// `side` must be a power of two.
pub fn hilbert_index(side: u64, mut x: u64, mut y: u64) -> u64 {
    let mut d = 0;
    let mut s = side / 2;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = side - 1 - x;
                y = side - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

/// Splits labelled tiles into spatially contiguous folds.
///
/// Within each region, tiles are ordered along a Hilbert curve over their
/// region-local grid position (x east, y north) and cut into `n_folds` runs of
/// equal count (the first runs take one extra tile when the count does not
/// divide). Fold `f` is the union of run `f` across regions. Excluded and
/// unlabelled tiles are ignored.
pub fn make_spatial_folds(tiles: &[Tile], n_folds: usize) -> Result<FoldSpec> {
    if n_folds < 2 {
        return Err(Error::InvalidFolds(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut regions: BTreeMap<&str, Vec<&Tile>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for t in tiles.iter().filter(|t| t.label().is_some()) {
        if !seen.insert(t.tile_id.as_str()) {
            return Err(Error::DuplicateTile(t.tile_id.clone()));
        }
        regions.entry(t.region_key.as_str()).or_default().push(t);
    }

    let mut assignment = BTreeMap::new();
    for (region, members) in regions {
        if members.len() < n_folds {
            return Err(Error::TooFewTiles {
                region: region.to_string(),
                available: members.len(),
                n_folds,
            });
        }
        let min_col = members.iter().map(|t| t.col).min().unwrap_or(0);
        let max_row = members.iter().map(|t| t.row).max().unwrap_or(0);
        let span = members
            .iter()
            .map(|t| (t.col - min_col).max(max_row - t.row))
            .max()
            .unwrap_or(0) as u64
            + 1;
        let side = span.next_power_of_two();

        let mut keyed: Vec<(u64, &str)> = members
            .iter()
            .map(|t| {
                let x = (t.col - min_col) as u64;
                let y = (max_row - t.row) as u64;
                (hilbert_index(side, x, y), t.tile_id.as_str())
            })
            .collect();
        keyed.sort();

        let n = keyed.len();
        let (base, extra) = (n / n_folds, n % n_folds);
        let mut start = 0;
        for fold in 0..n_folds {
            let len = base + usize::from(fold < extra);
            for &(_, id) in &keyed[start..start + len] {
                assignment.insert(id.to_string(), fold);
            }
            start += len;
        }
    }
    FoldSpec::new(n_folds, assignment)
}
