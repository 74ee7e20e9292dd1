use std::collections::HashMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Tile, TileStatus};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Curate,
    Exclude,
    Zero,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Curate => "curate",
            Decision::Exclude => "exclude",
            Decision::Zero => "zero",
        }
    }
}

/// One human judgement on a tile, as recorded in the append-only decision log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationDecision {
    pub tile_id: String,
    pub decision: Decision,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Applies a decision log to tiles. The latest decision per tile (by timestamp,
/// then log order) wins.
///
/// `curate` and `exclude` apply to tiles with a survey count; `zero` applies to
/// tiles without one and sets population to 0. Transitions are computed from the
/// survey state rather than the current status, so re-applying the same log is a
/// no-op.
pub fn apply_curation(tiles: &[Tile], decisions: &[CurationDecision]) -> Result<Vec<Tile>> {
    let index: HashMap<&str, usize> = tiles
        .iter()
        .enumerate()
        .map(|(i, t)| (t.tile_id.as_str(), i))
        .collect();

    let mut ordered: Vec<&CurationDecision> = decisions.iter().collect();
    ordered.sort_by_key(|d| d.timestamp);

    let mut latest: HashMap<usize, &CurationDecision> = HashMap::new();
    for d in ordered {
        let &i = index
            .get(d.tile_id.as_str())
            .ok_or_else(|| Error::UnknownTile(d.tile_id.clone()))?;
        check_transition(&tiles[i], d)?;
        latest.insert(i, d);
    }

    let mut out = tiles.to_vec();
    for (i, d) in latest {
        let tile = &mut out[i];
        match d.decision {
            Decision::Curate => tile.status = TileStatus::Curated,
            Decision::Exclude => tile.status = TileStatus::Excluded,
            Decision::Zero => {
                tile.status = TileStatus::Zero;
                tile.population = Some(0.0);
            }
        }
    }
    Ok(out)
}

fn check_transition(tile: &Tile, d: &CurationDecision) -> Result<()> {
    let surveyed = tile.status.has_survey();
    let reason = match d.decision {
        Decision::Curate | Decision::Exclude if !surveyed => "tile has no survey count",
        Decision::Zero if surveyed => "tile already has a survey count",
        _ => return Ok(()),
    };
    Err(Error::InvalidDecision {
        tile_id: tile.tile_id.clone(),
        decision: d.decision.as_str().to_string(),
        reason: reason.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::GridDef;
    use chrono::TimeZone;

    fn tiles() -> Vec<Tile> {
        let g = GridDef::new(0.0, 0.0, 100.0, 30, 30, "EPSG:32736", "BOA").unwrap();
        let mut out: Vec<Tile> = (0..474)
            .map(|i| {
                let mut t = Tile::unlabelled(&g, i / 30 % 30, i % 30);
                t.tile_id = format!("BOA:{}:{}", i / 30, i % 30);
                t.status = TileStatus::Surveyed;
                t.population = Some((i % 17) as f64 + 1.0);
                t
            })
            .collect();
        out.push(Tile::unlabelled(&g, 29, 29));
        out
    }

    fn dec(id: &str, decision: Decision, secs: i64) -> CurationDecision {
        CurationDecision {
            tile_id: id.into(),
            decision,
            annotator: "ann".into(),
            timestamp: Utc.timestamp_opt(1_600_000_000 + secs, 0).unwrap(),
            note: None,
        }
    }

    #[test]
    fn exclusions_leave_curated_remainder() {
        let ts = tiles();
        let surveyed: Vec<&Tile> = ts.iter().filter(|t| t.status == TileStatus::Surveyed).collect();
        assert_eq!(surveyed.len(), 474);
        let decisions: Vec<_> = surveyed
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let d = if i < 275 { Decision::Exclude } else { Decision::Curate };
                dec(&t.tile_id, d, i as i64)
            })
            .collect();
        let out = apply_curation(&ts, &decisions).unwrap();
        let curated = out.iter().filter(|t| t.status == TileStatus::Curated).count();
        let excluded = out.iter().filter(|t| t.status == TileStatus::Excluded).count();
        assert_eq!((curated, excluded), (199, 275));
    }

    #[test]
    fn no_decisions_is_identity() {
        let ts = tiles();
        assert_eq!(apply_curation(&ts, &[]).unwrap(), ts);
    }

    #[test]
    fn later_timestamp_wins_regardless_of_log_order() {
        let ts = tiles();
        let id = ts[0].tile_id.clone();
        let log = vec![dec(&id, Decision::Curate, 20), dec(&id, Decision::Exclude, 10)];
        let out = apply_curation(&ts, &log).unwrap();
        assert_eq!(out[0].status, TileStatus::Curated);
    }

    #[test]
    fn zero_sets_population() {
        let ts = tiles();
        let id = ts.last().unwrap().tile_id.clone();
        let out = apply_curation(&ts, &[dec(&id, Decision::Zero, 0)]).unwrap();
        let t = out.last().unwrap();
        assert_eq!((t.status, t.population), (TileStatus::Zero, Some(0.0)));
        t.validate().unwrap();
    }

    #[test]
    fn unknown_and_invalid_decisions() {
        let ts = tiles();
        match apply_curation(&ts, &[dec("MGD:1:1", Decision::Curate, 0)]) {
            Err(Error::UnknownTile(id)) => assert_eq!(id, "MGD:1:1"),
            other => panic!("unexpected {other:?}"),
        }
        let surveyed = ts[0].tile_id.clone();
        assert!(apply_curation(&ts, &[dec(&surveyed, Decision::Zero, 0)]).is_err());
        let unlabelled = ts.last().unwrap().tile_id.clone();
        assert!(apply_curation(&ts, &[dec(&unlabelled, Decision::Curate, 0)]).is_err());
    }

    #[test]
    fn idempotent() {
        let ts = tiles();
        let log = vec![
            dec(&ts[0].tile_id, Decision::Exclude, 1),
            dec(&ts[1].tile_id, Decision::Curate, 2),
            dec(&ts[0].tile_id, Decision::Curate, 3),
            dec(&ts.last().unwrap().tile_id, Decision::Zero, 4),
        ];
        let once = apply_curation(&ts, &log).unwrap();
        let twice = apply_curation(&once, &log).unwrap();
        assert_eq!(once, twice);
    }
}
