//! `icewater` — the SAR sea-ice segmentation pipeline CLI.
//!
//! Verbs: `fixture` (synthetic dataset), `prepare` (splits, normalization,
//! patch manifest), `train`, `predict`, `evaluate`, `report`.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_TRAINING: u8 = 3;

/// An error carrying its process exit code.
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Attach an exit class to any fallible expression.
pub trait Classify<T> {
    fn usage(self) -> CliResult<T>;
    fn data(self) -> CliResult<T>;
    fn training(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_USAGE,
            source: e.into(),
        })
    }

    fn data(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_DATA,
            source: e.into(),
        })
    }

    fn training(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_TRAINING,
            source: e.into(),
        })
    }
}

pub fn usage_error(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        source: anyhow::anyhow!(msg.into()),
    }
}

#[derive(Parser)]
#[command(
    name = "icewater",
    version,
    about = "Sea-ice / open-water segmentation of Sentinel-1 SAR scenes",
    propagate_version = true
)]
struct Cli {
    /// Pipeline configuration file (TOML); defaults are the full-scale
    /// protocol values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 17)]
    seed: u64,

    /// Output directory for the command's artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Zero out wall-clock fields so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic desk-scale dataset (scenes, labels, catalog,
    /// desk config, optional synthetic pretrained encoder weights).
    Fixture {
        /// Number of scenes (months 1..=N).
        #[arg(long, default_value_t = 3)]
        scenes: u8,
        /// Scene side length in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Also write synthetic encoder weights in the pretrained schema.
        #[arg(long)]
        with_pretrained: bool,
    },
    /// Ingest a dataset root and write split, normalization, and patch
    /// manifests.
    Prepare {
        /// Dataset root containing catalog.json (or ICEWATER_DATA_ROOT).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one or more runs per initialization strategy.
    Train {
        /// Directory written by `prepare`.
        #[arg(long)]
        prepared: PathBuf,
        /// Dataset root override (defaults to the one recorded by prepare).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initialization strategy: random | pretrained | both.
        #[arg(long, default_value = "random")]
        init: String,
        /// Independent runs per strategy (seed = base seed + run index).
        #[arg(long, default_value_t = icewater::train::DEFAULT_RUNS)]
        runs: usize,
        /// Encoder weight file (safetensors) for pretrained init.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Override the configured epoch cap.
        #[arg(long)]
        max_epochs: Option<u32>,
    },
    /// Predict a class map for one scene from a trained checkpoint.
    Predict {
        /// Run directory (containing model.safetensors) or checkpoint stem.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene id to predict (defaults to every test scene).
        #[arg(long)]
        scene: Option<String>,
        /// Inference mode override: single_pass | tiled.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Evaluate checkpoints on the held-out test scenes: class maps, error
    /// masks, confusion matrices, and metric files.
    Evaluate {
        /// Run directories (repeatable).
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Experiment directory written by `train`; evaluates all its runs.
        #[arg(long)]
        experiment: Option<PathBuf>,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Aggregate evaluation outputs into the comparison table and averaged
    /// figures.
    Report {
        /// Evaluation directories written by `evaluate` (repeatable).
        #[arg(long = "evaluation")]
        evaluations: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; real parse errors are usage.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let ctx = commands::Ctx {
        config_path: cli.config,
        seed: cli.seed,
        out: cli.out,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Fixture {
            scenes,
            size,
            with_pretrained,
        } => commands::fixture::run(&ctx, scenes, size, with_pretrained),
        Command::Prepare { data } => commands::prepare::run(&ctx, data),
        Command::Train {
            prepared,
            data,
            init,
            runs,
            pretrained,
            max_epochs,
        } => commands::train::run(&ctx, &prepared, data, &init, runs, pretrained, max_epochs),
        Command::Predict {
            checkpoint,
            prepared,
            data,
            scene,
            mode,
            tile,
            overlap,
        } => commands::predict::run(
            &ctx,
            &checkpoint,
            &prepared,
            data,
            scene,
            mode,
            tile,
            overlap,
        ),
        Command::Evaluate {
            runs,
            experiment,
            prepared,
            data,
            mode,
            tile,
            overlap,
        } => commands::evaluate::run(&ctx, runs, experiment, &prepared, data, mode, tile, overlap),
        Command::Report { evaluations } => commands::report::run(&ctx, &evaluations),
    }
}
