use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Representation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSource {
    #[serde(rename = "representation")]
    Representation,
    #[serde(rename = "public")]
    Public,
    #[serde(rename = "footprint")]
    Footprint,
    #[serde(rename = "public+footprint")]
    PublicFootprint,
}

impl FeatureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::Representation => "representation",
            FeatureSource::Public => "public",
            FeatureSource::Footprint => "footprint",
            FeatureSource::PublicFootprint => "public+footprint",
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            FeatureSource::Representation,
            FeatureSource::Public,
            FeatureSource::Footprint,
            FeatureSource::PublicFootprint,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown feature source `{s}`")))
    }
}

/// Fixed-width feature vectors keyed by tile id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    feature_names: Vec<String>,
    rows: BTreeMap<String, Vec<f64>>,
    source: FeatureSource,
}

impl FeatureTable {
    pub fn new(feature_names: Vec<String>, rows: BTreeMap<String, Vec<f64>>, source: FeatureSource) -> Result<Self> {
        for (id, row) in &rows {
            if row.len() != feature_names.len() {
                return Err(Error::Shape(format!(
                    "row `{id}` has {} values for {} features",
                    row.len(),
                    feature_names.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "row `{id}` has a non-finite value in `{}`",
                    feature_names[j]
                )));
            }
        }
        Ok(FeatureTable {
            feature_names,
            rows,
            source,
        })
    }

    /// Columns `r0`, `r1`, ... from encoder representations.
    pub fn from_representations(reps: &[Representation]) -> Result<Self> {
        let dim = reps.first().map_or(0, |r| r.vector.len());
        let mut rows = BTreeMap::new();
        for r in reps {
            if rows.insert(r.tile_id.clone(), r.vector.clone()).is_some() {
                return Err(Error::DuplicateTile(r.tile_id.clone()));
            }
        }
        Self::new((0..dim).map(|i| format!("r{i}")).collect(), rows, FeatureSource::Representation)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn rows(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.rows
    }

    pub fn get(&self, tile_id: &str) -> Option<&[f64]> {
        self.rows.get(tile_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Rows for the given ids in order, or the list of ids without a row.
    pub fn select<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<&[f64]>> {
        let mut out = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            match self.get(id) {
                Some(r) => out.push(r),
                None => missing.push(id.to_string()),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingFeatures(missing))
        }
    }

    /// Restriction to the given ids.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let ids: Vec<&str> = ids.into_iter().collect();
        let rows = self.select(ids.iter().copied())?;
        Ok(FeatureTable {
            feature_names: self.feature_names.clone(),
            rows: ids.iter().map(|s| s.to_string()).zip(rows.into_iter().map(<[f64]>::to_vec)).collect(),
            source: self.source,
        })
    }

    /// Column-wise concatenation over the tiles present in both tables.
    pub fn join(&self, other: &FeatureTable, source: FeatureSource) -> Result<Self> {
        let mut names = self.feature_names.clone();
        names.extend(other.feature_names.iter().cloned());
        let rows = self
            .rows
            .iter()
            .filter_map(|(id, a)| other.rows.get(id).map(|b| (id.clone(), [a.as_slice(), b].concat())))
            .collect();
        Self::new(names, rows, source)
    }

    /// CSV with a `tile_id` column followed by one column per feature.
    pub fn read_csv(path: &Path, source: FeatureSource) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("tile_id") {
            return Err(Error::InvalidArgument(format!(
                "{}: first column must be `tile_id`",
                path.display()
            )));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = BTreeMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("{} row {}: {e}", path.display(), line + 2)))?;
            if rows.insert(id.clone(), values).is_some() {
                return Err(Error::DuplicateTile(id));
            }
        }
        Self::new(names, rows, source)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["tile_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in &self.rows {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_and_missing_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows = BTreeMap::from([("a".to_string(), vec![1.0, 0.1]), ("b".to_string(), vec![2.5, -3.0])]);
        let t = FeatureTable::new(vec!["x".into(), "y".into()], rows, FeatureSource::Public).unwrap();
        let p = dir.path().join("f.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(FeatureTable::read_csv(&p, FeatureSource::Public).unwrap(), t);
        match t.select(["a", "zz", "qq"]) {
            Err(Error::MissingFeatures(m)) => assert_eq!(m, vec!["zz", "qq"]),
            other => panic!("{other:?}"),
        }
        let joined = t.join(&t, FeatureSource::PublicFootprint).unwrap();
        assert_eq!(joined.get("b").unwrap(), &[2.5, -3.0, 2.5, -3.0]);
    }

    #[test]
    fn rejects_ragged_and_non_finite_rows() {
        let ragged = BTreeMap::from([("a".to_string(), vec![1.0])]);
        assert!(FeatureTable::new(vec!["x".into(), "y".into()], ragged, FeatureSource::Public).is_err());
        let nan = BTreeMap::from([("a".to_string(), vec![f64::NAN])]);
        assert!(FeatureTable::new(vec!["x".into()], nan, FeatureSource::Public).is_err());
    }
}
