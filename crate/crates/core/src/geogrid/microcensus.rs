use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{normalize_crs, GridDef, Tile, TileStatus};
use crate::error::{Error, Result};

/// One surveyed household.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrocensusRecord {
    pub x: f64,
    pub y: f64,
    pub household_size: u32,
    pub psu_id: String,
    pub survey_date: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RejectedRecord {
    pub index: usize,
    pub record: MicrocensusRecord,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregation {
    /// Surveyed tiles in row-major order; cells without records are absent.
    pub tiles: Vec<Tile>,
    pub rejects: Vec<RejectedRecord>,
}

impl Aggregation {
    pub fn total_population(&self) -> f64 {
        self.tiles.iter().filter_map(|t| t.population).sum()
    }
}

/// Sums household sizes into the grid cell containing each household.
///
/// `records_crs` is the CRS the coordinates are expressed in; it must match the
/// grid's, since no reprojection is done. Out-of-extent records are reported in
/// [`Aggregation::rejects`].
pub fn aggregate_microcensus(
    records: &[MicrocensusRecord],
    records_crs: &str,
    grid: &GridDef,
) -> Result<Aggregation> {
    grid.validate()?;
    grid.check_crs(records_crs)?;

    let mut sums: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rejects = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        match grid.cell_of(rec.x, rec.y) {
            Some(cell) => *sums.entry(cell).or_default() += u64::from(rec.household_size),
            None => rejects.push(RejectedRecord {
                index,
                record: rec.clone(),
                reason: "outside grid extent".into(),
            }),
        }
    }

    let tiles = sums
        .into_iter()
        .map(|((row, col), total)| Tile {
            tile_id: grid.tile_id(row, col),
            row,
            col,
            population: Some(total as f64),
            status: TileStatus::Surveyed,
            region_key: grid.district_id.clone(),
        })
        .collect();
    Ok(Aggregation { tiles, rejects })
}

pub fn read_microcensus_csv(path: &Path) -> Result<Vec<MicrocensusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    for required in ["x", "y", "household_size", "psu_id", "survey_date"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::InvalidArgument(format!(
                "{}: missing column `{required}`",
                path.display()
            )));
        }
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Deserialize)]
struct FeatureCollection {
    #[serde(default)]
    crs: Option<NamedCrs>,
    features: Vec<Feature>,
}

#[derive(Deserialize)]
struct NamedCrs {
    properties: NamedCrsProperties,
}

#[derive(Deserialize)]
struct NamedCrsProperties {
    name: String,
}

#[derive(Deserialize)]
struct Feature {
    geometry: Geometry,
    properties: FeatureProperties,
}

#[derive(Deserialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<f64>,
}

#[derive(Deserialize)]
struct FeatureProperties {
    household_size: u32,
    psu_id: String,
    survey_date: NaiveDate,
}

/// Reads GeoJSON point features. Returns the declared CRS (legacy `crs` member),
/// if any, alongside the records.
pub fn read_microcensus_geojson(path: &Path) -> Result<(Option<String>, Vec<MicrocensusRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fc: FeatureCollection = serde_json::from_reader(BufReader::new(file))?;
    let mut records = Vec::with_capacity(fc.features.len());
    for (i, f) in fc.features.into_iter().enumerate() {
        if f.geometry.kind != "Point" || f.geometry.coordinates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{}: feature {i} is not a point",
                path.display()
            )));
        }
        records.push(MicrocensusRecord {
            x: f.geometry.coordinates[0],
            y: f.geometry.coordinates[1],
            household_size: f.properties.household_size,
            psu_id: f.properties.psu_id,
            survey_date: f.properties.survey_date,
        });
    }
    Ok((fc.crs.map(|c| normalize_crs(&c.properties.name)), records))
}
