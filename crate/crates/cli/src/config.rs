use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use popgrid_core::encoder::FinetuneConfig;
use popgrid_core::explain::TsneConfig;
use popgrid_core::geogrid::{GridDef, TileStatus};
use popgrid_core::pretext::{BarlowConfig, DeepClusterConfig};
use popgrid_core::regress::{ParamGrid, RFConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory with `grids.json`, `tiles.jsonl`, `chips/` and optional
    /// curation, reference and census files.
    pub state_dir: PathBuf,
    /// Optional RGB mosaic used for chips missing from the cache.
    pub imagery: Option<PathBuf>,
    pub microcensus: Option<PathBuf>,
    /// Tile manifest; defaults to `<state_dir>/tiles.jsonl`.
    pub tiles: Option<PathBuf>,
    /// Fold file; spatial folds are generated when absent.
    pub folds: Option<PathBuf>,
    /// Encoder manifest; a seeded scratch encoder is used when absent.
    pub encoder: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub census: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            state_dir: PathBuf::from("."),
            imagery: None,
            microcensus: None,
            tiles: None,
            folds: None,
            encoder: None,
            model: None,
            census: None,
            checkpoints: PathBuf::from("checkpoints"),
            outputs: PathBuf::from("outputs"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretextMethod {
    BarlowTwins,
    Deepcluster,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextSection {
    pub method: PretextMethod,
    pub epochs: usize,
    pub barlow: BarlowConfig,
    pub deepcluster: DeepClusterConfig,
}

impl Default for PretextSection {
    fn default() -> Self {
        PretextSection {
            method: PretextMethod::BarlowTwins,
            epochs: 5,
            barlow: BarlowConfig::default(),
            deepcluster: DeepClusterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McDropoutSection {
    pub enabled: bool,
    pub passes: usize,
    pub p: f64,
}

impl Default for McDropoutSection {
    fn default() -> Self {
        McDropoutSection { enabled: false, passes: 30, p: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Tiles to explain; the first `max_tiles` labelled tiles when empty.
    pub tiles: Vec<String>,
    pub max_tiles: usize,
    pub tsne: TsneConfig,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection { tiles: Vec::new(), max_tiles: 10, tsne: TsneConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    /// District to work on when `grids.json` lists several.
    pub district: Option<String>,
    pub grid: Option<GridDef>,
    /// Statuses whose tiles are used as training labels.
    pub training_statuses: Vec<TileStatus>,
    pub n_folds: usize,
    pub seed: u64,
    pub scratch_encoder_seed: u64,
    pub finetune: FinetuneConfig,
    pub forest: RFConfig,
    pub grid_search: bool,
    pub param_grid: ParamGrid,
    pub pretext: PretextSection,
    pub mc_dropout: McDropoutSection,
    pub explain: ExplainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            district: None,
            grid: None,
            training_statuses: vec![TileStatus::Surveyed, TileStatus::Curated, TileStatus::Zero],
            n_folds: 4,
            seed: 0,
            scratch_encoder_seed: 0,
            finetune: FinetuneConfig::default(),
            forest: RFConfig::default(),
            grid_search: false,
            param_grid: ParamGrid::default(),
            pretext: PretextSection::default(),
            mc_dropout: McDropoutSection::default(),
            explain: ExplainSection::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a plain string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{part}` is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads the optional config file, applies overrides, then parses strictly.
    /// Relative paths in the file are taken relative to the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?
                .parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        let base = path
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let p = &mut cfg.paths;
        for field in [&mut p.state_dir, &mut p.checkpoints, &mut p.outputs] {
            resolve(&base, field);
        }
        for field in [
            &mut p.imagery,
            &mut p.microcensus,
            &mut p.tiles,
            &mut p.folds,
            &mut p.encoder,
            &mut p.model,
            &mut p.census,
        ]
        .into_iter()
        .flatten()
        {
            resolve(&base, field);
        }
        Ok(cfg)
    }

    /// Checks that every configured input path exists.
    pub fn check_inputs(&self) -> Result<()> {
        let p = &self.paths;
        let inputs = [
            Some(&p.state_dir),
            p.imagery.as_ref(),
            p.microcensus.as_ref(),
            p.tiles.as_ref(),
            p.folds.as_ref(),
            p.encoder.as_ref(),
            p.model.as_ref(),
            p.census.as_ref(),
        ];
        for path in inputs.into_iter().flatten() {
            if !path.exists() {
                bail!("input path {} does not exist", path.display());
            }
        }
        Ok(())
    }
}
