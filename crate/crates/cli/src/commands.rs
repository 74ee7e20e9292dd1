use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use popgrid_core::encoder::{extract, finetune, Encoder, Pretraining};
use popgrid_core::evalx::{compute_metrics, crossvalidate, MetricsReport, PredictionSet};
use popgrid_core::explain::{project_embeddings, regression_activation_map, write_embedding_csv};
use popgrid_core::geogrid::{
    aggregate_microcensus, read_microcensus_csv, read_microcensus_geojson, write_tile_manifest, Tile,
};
use popgrid_core::imagery::Chip;
use popgrid_core::mapgen::{census_check, compare_products, generate_map, read_census_totals, write_float_grid, PopulationRaster, TilePredictor};
use popgrid_core::pipeline::{
    encoder_forest_cv, prepare_chips, EncoderForestConfig, EncoderForestPredictor, ForestPipeline, HeadPredictor,
    NullPipeline,
};
use popgrid_core::pretext::{deepcluster_epoch, write_pretext_log, BarlowTrainer, ClusterState, PretextRecord};
use popgrid_core::regress::{fit, grid_search, FeatureTable, PopulationModel};
use popgrid_core::seed::derive_seed_index;
use popgrid_core::synth::{generate, SynthConfig};
use serde_json::json;

use crate::config::{PretextMethod, RunConfig};
use crate::data;
use crate::run::RunContext;

fn base_seeds(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "seed": cfg.seed,
        "scratch_encoder_seed": cfg.scratch_encoder_seed,
        "finetune": cfg.finetune.seed,
        "forest": cfg.forest.seed,
    })
}

fn labelled_with_chips(ctx: &mut RunContext) -> Result<(Vec<Tile>, Vec<Chip>)> {
    let tiles = data::tiles(ctx)?;
    let labelled = data::labelled(ctx, &tiles);
    if labelled.is_empty() {
        bail!("no labelled tiles with statuses {:?}", ctx.cfg.training_statuses);
    }
    let chips = data::chips_for(ctx, &labelled)?;
    Ok((labelled, chips))
}

fn labels(tiles: &[Tile]) -> BTreeMap<String, f64> {
    tiles
        .iter()
        .filter_map(|t| t.label().map(|y| (t.tile_id.clone(), y)))
        .collect()
}

fn representation_table(encoder: &Encoder, chips: &[Chip]) -> Result<FeatureTable> {
    Ok(FeatureTable::from_representations(&extract(encoder, chips)?)?)
}

/// Saves `encoder` as `<checkpoints>/<stem>.{json,weights}`, tagging its
/// pretraining and training log.
fn save_encoder(
    ctx: &mut RunContext,
    encoder: &Encoder,
    stem: &str,
    pretraining: Option<Pretraining>,
    log: Option<PathBuf>,
) -> Result<PathBuf> {
    let dir = ctx.cfg.paths.checkpoints.clone();
    ctx.output_at(dir.join(format!("{stem}.weights")));
    let path = ctx.output_at(dir.join(format!("{stem}.json")));
    let mut manifest = encoder.save(&dir, stem)?;
    if let Some(p) = pretraining {
        manifest.pretraining = p;
    }
    manifest.training_log = log;
    manifest.write_json(&path)?;
    Ok(path)
}

pub fn synth(ctx: &mut RunContext, synth: &SynthConfig, mosaic: bool) -> Result<serde_json::Value> {
    let out = ctx.cfg.paths.outputs.clone();
    let dataset = generate(synth)?;
    for name in ["grids.json", "tiles.jsonl", "chips", "microcensus.csv", "reference", "census.json"] {
        ctx.output(name);
    }
    if mosaic {
        ctx.output("mosaic.tif");
    }
    dataset.write(&out, mosaic)?;
    let template = ctx.output("popgrid.toml");
    fs::write(
        &template,
        format!(
            "# Paths are relative to this file.\n\
             [paths]\n\
             state_dir = \".\"\n\
             outputs = \"outputs\"\n\
             checkpoints = \"checkpoints\"\n\
             microcensus = \"microcensus.csv\"\n\
             census = \"census.json\"\n\
             {}\n\
             [finetune]\n\
             max_epochs = 10\n",
            if mosaic { "imagery = \"mosaic.tif\"\n" } else { "" }
        ),
    )?;
    tracing::info!(tiles = dataset.tiles.len(), dir = %out.display(), "synthetic dataset written");
    Ok(json!({ "synth": synth.seed }))
}

pub fn grid(ctx: &mut RunContext, crs: Option<String>) -> Result<serde_json::Value> {
    let grid = data::grid(ctx)?;
    let path = ctx.input(data::require(&ctx.cfg.paths.microcensus, "microcensus")?);
    let is_geojson = matches!(path.extension().and_then(|e| e.to_str()), Some("geojson" | "json"));
    let (declared, records) = if is_geojson {
        read_microcensus_geojson(&path)?
    } else {
        (None, read_microcensus_csv(&path)?)
    };
    let records_crs = crs.or(declared).unwrap_or_else(|| grid.crs_code.clone());
    let agg = aggregate_microcensus(&records, &records_crs, &grid)?;
    let tiles_path = ctx.output("tiles.jsonl");
    write_tile_manifest(&tiles_path, &agg.tiles)?;
    let rejects_path = ctx.output("rejects.jsonl");
    let mut lines = String::new();
    for r in &agg.rejects {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(&rejects_path, lines)?;
    tracing::info!(
        tiles = agg.tiles.len(),
        rejects = agg.rejects.len(),
        population = agg.total_population(),
        "microcensus aggregated"
    );
    Ok(json!({}))
}

pub fn extract_cmd(ctx: &mut RunContext) -> Result<serde_json::Value> {
    let encoder = data::encoder(ctx)?;
    let tiles = data::tiles(ctx)?;
    let chips = data::chips_for(ctx, &tiles)?;
    let table = representation_table(&encoder, &chips)?;
    let out = ctx.output("representations.csv");
    table.write_csv(&out)?;
    Ok(base_seeds(&ctx.cfg))
}

pub fn pretext(ctx: &mut RunContext) -> Result<serde_json::Value> {
    let encoder = data::encoder(ctx)?;
    let tiles = data::tiles(ctx)?;
    let chips: Vec<Chip> = prepare_chips(&encoder, data::chips_for(ctx, &tiles)?)?.into_values().collect();
    let section = ctx.cfg.pretext.clone();
    let mut records = Vec::new();
    let (encoder, stem, tag) = match section.method {
        PretextMethod::BarlowTwins => {
            let mut trainer = BarlowTrainer::new(encoder, section.barlow.clone())?;
            for epoch in 0..section.epochs {
                let loss = trainer.epoch(&chips, derive_seed_index(ctx.cfg.seed, epoch as u64))?;
                tracing::info!(epoch, loss, "barlow epoch");
                records.push(PretextRecord { epoch, loss, cluster_sizes: String::new() });
            }
            (trainer.into_encoder(), "barlow", Pretraining::BarlowTwins)
        }
        PretextMethod::Deepcluster => {
            let mut enc = encoder;
            let mut state = ClusterState::new(section.deepcluster.k);
            for epoch in 0..section.epochs {
                let seed = derive_seed_index(ctx.cfg.seed, epoch as u64);
                let out = deepcluster_epoch(&enc, &chips, &state, &section.deepcluster, seed)?;
                let sizes = out.state.cluster_sizes();
                tracing::info!(epoch, loss = out.loss, ?sizes, "deepcluster epoch");
                records.push(PretextRecord {
                    epoch,
                    loss: out.loss,
                    cluster_sizes: sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
                });
                enc = out.encoder;
                state = out.state;
            }
            (enc, "deepcluster", Pretraining::Deepcluster)
        }
    };
    let log = ctx.output("pretext_log.csv");
    write_pretext_log(&log, &records)?;
    save_encoder(ctx, &encoder, stem, Some(tag), Some(fs::canonicalize(&log)?))?;
    let mut seeds = base_seeds(&ctx.cfg);
    seeds["epochs"] = json!((0..section.epochs).map(|e| derive_seed_index(ctx.cfg.seed, e as u64)).collect::<Vec<_>>());
    Ok(seeds)
}

fn finetune_all(ctx: &mut RunContext) -> Result<(Encoder, Vec<Tile>, Vec<Chip>, PathBuf)> {
    let base = data::encoder(ctx)?;
    let (tiles, chips) = labelled_with_chips(ctx)?;
    let chips: Vec<Chip> = {
        let mut by_id = prepare_chips(&base, chips)?;
        tiles.iter().map(|t| by_id.remove(&t.tile_id).expect("chip per tile")).collect()
    };
    let pairs: Vec<(Chip, f64)> = tiles
        .iter()
        .zip(&chips)
        .map(|(t, c)| (c.clone(), t.label().expect("labelled")))
        .collect();
    let (encoder, log) = finetune(&base, &pairs, &ctx.cfg.finetune)?;
    let log_path = ctx.output("training_log.csv");
    log.write_csv(&log_path)?;
    if let Some(best) = log.best() {
        tracing::info!(epoch = best.epoch, val_loss = best.val_loss, "fine-tuning finished");
    }
    let pretraining = base.manifest().pretraining;
    let log_abs = fs::canonicalize(&log_path)?;
    save_encoder(ctx, &encoder, "finetuned", Some(pretraining), Some(log_abs))?;
    Ok((encoder, tiles, chips, log_path))
}

pub fn finetune_cmd(ctx: &mut RunContext) -> Result<serde_json::Value> {
    finetune_all(ctx)?;
    Ok(base_seeds(&ctx.cfg))
}

pub fn train(ctx: &mut RunContext) -> Result<serde_json::Value> {
    let (encoder, tiles, chips, _) = finetune_all(ctx)?;
    let table = representation_table(&encoder, &chips)?;
    let labels = labels(&tiles);
    let rf = if ctx.cfg.grid_search {
        let folds = data::folds(ctx, &tiles)?;
        let result = grid_search(&table, &labels, &folds, &ctx.cfg.param_grid, ctx.cfg.forest.seed)?;
        let scores = ctx.output("grid_scores.csv");
        result.write_csv(&scores)?;
        tracing::info!(best = ?result.best, "grid search finished");
        result.best
    } else {
        ctx.cfg.forest
    };
    let model = fit(&table, &labels, &rf)?;
    let path = ctx.output("model.json");
    model.write_json(&path)?;
    Ok(base_seeds(&ctx.cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CvPipeline {
    Null,
    Forest,
    EncoderForest,
}

pub fn cv(ctx: &mut RunContext, pipeline: CvPipeline) -> Result<serde_json::Value> {
    let tiles = data::tiles(ctx)?;
    let labelled = data::labelled(ctx, &tiles);
    let folds = data::folds(ctx, &labelled)?;
    let (predictions, metrics): (PredictionSet, MetricsReport) = match pipeline {
        CvPipeline::Null => crossvalidate(&mut NullPipeline::default(), &labelled, &folds)?,
        CvPipeline::Forest => {
            let encoder = data::encoder(ctx)?;
            let chips = data::chips_for(ctx, &labelled)?;
            let table = representation_table(&encoder, &chips)?;
            crossvalidate(&mut ForestPipeline::new(&table, ctx.cfg.forest), &labelled, &folds)?
        }
        CvPipeline::EncoderForest => {
            let encoder = data::encoder(ctx)?;
            let chips = prepare_chips(&encoder, data::chips_for(ctx, &labelled)?)?;
            let cfg = EncoderForestConfig {
                finetune: ctx.cfg.finetune.clone(),
                forest: (!ctx.cfg.grid_search).then_some(ctx.cfg.forest),
                grid: ctx.cfg.param_grid.clone(),
                seed: ctx.cfg.forest.seed,
            };
            let report = encoder_forest_cv(&encoder, &labelled, &chips, &folds, &cfg)?;
            if let Some(grid) = &report.grid {
                let scores = ctx.output("grid_scores.csv");
                grid.write_csv(&scores)?;
            }
            for (f, log) in report.training_logs.iter().enumerate() {
                let p = ctx.output(&format!("training_log_fold{f}.csv"));
                log.write_csv(&p)?;
            }
            (report.predictions, report.metrics)
        }
    };
    debug_assert_eq!(compute_metrics(&predictions), metrics);
    let pred_path = ctx.output("predictions.csv");
    predictions.write_csv(&pred_path)?;
    let metrics_path = ctx.output("metrics.json");
    metrics.write_json(&metrics_path)?;
    tracing::info!(r2 = metrics.r2, meae = metrics.meae, n = metrics.n, "cross-validation finished");
    let mut seeds = base_seeds(&ctx.cfg);
    if pipeline == CvPipeline::EncoderForest {
        seeds["finetune_folds"] = json!((0..folds.n_folds())
            .map(|f| derive_seed_index(ctx.cfg.finetune.seed, f as u64))
            .collect::<Vec<_>>());
    }
    Ok(seeds)
}

pub fn predict_map(ctx: &mut RunContext) -> Result<serde_json::Value> {
    let grid = data::grid(ctx)?;
    let encoder = data::encoder(ctx)?;
    let model = match ctx.cfg.paths.model.clone() {
        Some(p) => Some(PopulationModel::read_json(&ctx.input(p))?),
        None => None,
    };
    let mc = &ctx.cfg.mc_dropout;
    let mc_dropout = mc.enabled.then_some((mc.passes, mc.p, ctx.cfg.seed));
    let predictor: Box<dyn TilePredictor + '_> = match &model {
        Some(m) => Box::new(EncoderForestPredictor { encoder: &encoder, model: m }),
        None if encoder.linear_head().is_some() => Box::new(HeadPredictor { encoder: &encoder, mc_dropout }),
        None => bail!("no model configured and the encoder has no regression head"),
    };
    let source = data::chips(ctx)?;
    let out = generate_map(predictor.as_ref(), &grid, &source)?;
    let tif = ctx.output("population.tif");
    out.raster.write_geotiff(&tif)?;
    let log = ctx.output("prediction_log.csv");
    out.write_prediction_log(&log)?;
    let report = ctx.output("map_report.json");
    out.write_report(&report)?;
    let census = ctx
        .cfg
        .paths
        .census
        .clone()
        .or_else(|| Some(ctx.cfg.paths.state_dir.join("census.json")).filter(|p| p.exists()));
    if let Some(path) = census {
        let totals = read_census_totals(&ctx.input(path))?;
        match totals.get(&grid.district_id) {
            Some(&projected) => {
                let rel = census_check(&out.raster, projected)?;
                let p = ctx.output("census_check.json");
                fs::write(
                    &p,
                    serde_json::to_vec_pretty(&json!({
                        "district_id": grid.district_id,
                        "map_total": out.raster.total(),
                        "projected_total": projected,
                        "relative_difference": rel,
                    }))?,
                )?;
                tracing::info!(relative_difference = rel, "census check");
            }
            None => tracing::warn!(district = %grid.district_id, "no census total for district"),
        }
    }
    tracing::info!(
        valid = out.report.n_valid,
        nodata = out.report.n_nodata,
        total = out.report.total,
        "map written"
    );
    let mut seeds = base_seeds(&ctx.cfg);
    if let Some((n, p, seed)) = mc_dropout {
        seeds["mc_dropout"] = json!({ "passes": n, "p": p, "seed": seed });
    }
    Ok(seeds)
}

pub fn compare(ctx: &mut RunContext, ours: &Path, theirs: &Path) -> Result<serde_json::Value> {
    let grid = data::grid(ctx)?;
    let ours = PopulationRaster::read_aligned(&ctx.input(ours), &grid)?;
    let theirs = PopulationRaster::read_aligned(&ctx.input(theirs), &grid)?;
    let cmp = compare_products(&ours, &theirs)?;
    let json_path = ctx.output("comparison.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&cmp)?)?;
    let diff = ctx.output("difference.tif");
    write_float_grid(&diff, &grid, &cmp.difference, "ours minus theirs")?;
    tracing::info!(spearman = cmp.spearman, pearson = cmp.pearson, cells = cmp.n_cells, "products compared");
    Ok(json!({}))
}

pub fn explain(ctx: &mut RunContext) -> Result<serde_json::Value> {
    let encoder = data::encoder(ctx)?;
    if encoder.linear_head().is_none() {
        bail!("activation maps need an encoder with a linear regression head; pass a fine-tuned checkpoint");
    }
    let tiles = data::tiles(ctx)?;
    let labelled = data::labelled(ctx, &tiles);
    let section = ctx.cfg.explain.clone();
    let chosen: Vec<Tile> = if section.tiles.is_empty() {
        labelled.iter().take(section.max_tiles).cloned().collect()
    } else {
        section
            .tiles
            .iter()
            .map(|id| {
                tiles
                    .iter()
                    .find(|t| &t.tile_id == id)
                    .cloned()
                    .ok_or_else(|| anyhow!("unknown tile `{id}`"))
            })
            .collect::<Result<_>>()?
    };
    let dir = ctx.output("explain");
    data::ensure_dir(&dir)?;
    for (tile, chip) in chosen.iter().zip(data::chips_for(ctx, &chosen)?) {
        let map = regression_activation_map(&encoder, &chip)?;
        map.export(&chip, &dir, &tile.tile_id.replace(':', "_"))?;
    }
    let chips = data::chips_for(ctx, &labelled)?;
    let reps = extract(&encoder, &chips)?;
    let points = project_embeddings(&reps, &section.tsne)?;
    let emb = ctx.output("embedding.csv");
    write_embedding_csv(&emb, &points, &labelled)?;
    let mut seeds = base_seeds(&ctx.cfg);
    seeds["tsne"] = json!(section.tsne.seed);
    Ok(seeds)
}

pub fn serve(state_dir: &Path, port: u16) -> Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(popgrid_core::curation::serve(state_dir, addr))?;
    Ok(())
}

