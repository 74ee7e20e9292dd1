mod commands;
mod config;
mod data;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use popgrid_core::synth::SynthConfig;

use crate::commands::CvPipeline;
use crate::config::RunConfig;
use crate::run::RunContext;

/// Gridded population estimation from imagery and microcensus counts.
#[derive(Parser)]
#[command(name = "popgrid", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, e.g. `--set finetune.max_epochs=3`. Give all
    /// overrides before the subcommand. Relative paths set this way are
    /// resolved against the config file's directory, unlike the path
    /// shorthands below, which are taken relative to the working directory.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set paths.outputs=DIR`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--set paths.state_dir=DIR`.
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
    /// Shorthand for `--set paths.encoder=FILE`.
    #[arg(long, global = true)]
    encoder: Option<PathBuf>,
    /// Shorthand for `--set paths.model=FILE`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Shorthand for `--set n_folds=N`.
    #[arg(long, global = true)]
    n_folds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic state directory with a config template.
    Synth {
        #[arg(long, default_value_t = 20)]
        rows: usize,
        #[arg(long, default_value_t = 20)]
        cols: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Also write an RGB mosaic covering the grid.
        #[arg(long)]
        mosaic: bool,
    },
    /// Aggregate microcensus households into surveyed tiles.
    Grid {
        /// CRS of the household coordinates; defaults to the file's or the grid's.
        #[arg(long)]
        crs: Option<String>,
    },
    /// Write encoder representations for every tile.
    Extract,
    /// Self-supervised pretraining on every chip.
    Pretext,
    /// Fine-tune the encoder on the labelled tiles.
    Finetune,
    /// Fine-tune, then fit the forest on the fine-tuned representations.
    Train {
        /// Choose forest settings by spatial cross-validation.
        #[arg(long)]
        grid_search: bool,
    },
    /// Spatial cross-validation of a pipeline.
    Cv {
        #[arg(long, value_enum, default_value = "encoder-forest")]
        pipeline: CvPipeline,
        #[arg(long)]
        grid_search: bool,
    },
    /// Predict every cell of the grid and write a GeoTIFF.
    PredictMap,
    /// Compare two aligned population rasters.
    Compare {
        ours: PathBuf,
        theirs: PathBuf,
    },
    /// Activation maps and a 2-D embedding of the representations.
    Explain,
    /// Run the curation HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Grid { .. } => "grid",
            Command::Extract => "extract",
            Command::Pretext => "pretext",
            Command::Finetune => "finetune",
            Command::Train { .. } => "train",
            Command::Cv { .. } => "cv",
            Command::PredictMap => "predict-map",
            Command::Compare { .. } => "compare",
            Command::Explain => "explain",
            Command::Serve { .. } => "serve",
        }
    }
}

fn overrides(g: &Global, command: &Command) -> Vec<String> {
    let mut sets = g.overrides.clone();
    let path = |k: &str, p: &PathBuf| {
        let abs = std::path::absolute(p).unwrap_or_else(|_| p.clone());
        format!("{k}={}", toml::Value::String(abs.display().to_string()))
    };
    if let Some(s) = g.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(n) = g.n_folds {
        sets.push(format!("n_folds={n}"));
    }
    if let Some(p) = &g.out {
        sets.push(path("paths.outputs", p));
    }
    if let Some(p) = &g.state_dir {
        sets.push(path("paths.state_dir", p));
    }
    if let Some(p) = &g.encoder {
        sets.push(path("paths.encoder", p));
    }
    if let Some(p) = &g.model {
        sets.push(path("paths.model", p));
    }
    if let Command::Train { grid_search: true } | Command::Cv { grid_search: true, .. } = command {
        sets.push("grid_search=true".into());
    }
    sets
}

fn execute(ctx: &mut RunContext, command: &Command) -> Result<serde_json::Value> {
    match command {
        Command::Synth { rows, cols, noise, mosaic } => {
            let synth = SynthConfig {
                n_rows: *rows,
                n_cols: *cols,
                noise_std: *noise,
                seed: ctx.cfg.seed,
                ..SynthConfig::default()
            };
            commands::synth(ctx, &synth, *mosaic)
        }
        Command::Grid { crs } => commands::grid(ctx, crs.clone()),
        Command::Extract => commands::extract_cmd(ctx),
        Command::Pretext => commands::pretext(ctx),
        Command::Finetune => commands::finetune_cmd(ctx),
        Command::Train { .. } => commands::train(ctx),
        Command::Cv { pipeline, .. } => commands::cv(ctx, *pipeline),
        Command::PredictMap => commands::predict_map(ctx),
        Command::Compare { ours, theirs } => commands::compare(ctx, ours, theirs),
        Command::Explain => commands::explain(ctx),
        Command::Serve { .. } => unreachable!("serve has no run context"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &overrides(&cli.global, &cli.command))?;
    if let Command::Serve { port } = cli.command {
        return commands::serve(&cfg.paths.state_dir, port);
    }
    if !matches!(cli.command, Command::Synth { .. }) {
        cfg.check_inputs()?;
    }
    let mut ctx = RunContext::new(cli.command.name(), cfg)?;
    match execute(&mut ctx, &cli.command) {
        Ok(seeds) => {
            let manifest = ctx.finish(seeds)?;
            tracing::info!(manifest = %manifest.display(), "done");
            Ok(())
        }
        Err(e) => {
            ctx.clean();
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
