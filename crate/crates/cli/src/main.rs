//! `oneshot`: train, detect, evaluate, ablate and generate synthetic data.
//!
//! Configuration precedence, lowest first: preset defaults, `--config` file
//! (TOML, or JSON for `.json` files), command-line flags.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure.

mod commands;
mod config;
mod error;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "oneshot", version, about = "One-shot landmark detection from a single annotated template")]
struct Cli {
    /// Log progress at info level (debug with -vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that build a pipeline configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset supplying defaults: head, hand or synthetic.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of forward candidates kept by bidirectional matching.
    #[arg(long)]
    pub k: Option<usize>,
    /// Backbone kind: synthetic-positional, synthetic-noisy or external-vit.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Directory of precomputed descriptor files for the external-vit backbone.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train decoders on one annotated template and write a bundle.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest; its template sample is used.
        #[arg(long, conflicts_with_all = ["template", "landmarks"])]
        manifest: Option<PathBuf>,
        /// Template image (PNG), used with --landmarks.
        #[arg(long, requires = "landmarks")]
        template: Option<PathBuf>,
        /// Template landmark CSV (`index,x,y`).
        #[arg(long, requires = "template")]
        landmarks: Option<PathBuf>,
    },
    /// Detect landmarks in images or directories of PNG images.
    Detect {
        #[arg(long)]
        bundle: PathBuf,
        /// Images or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory of ground-truth CSVs named after the images, drawn in green.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        descriptors: Option<PathBuf>,
        /// Write overlay and heatmap PNGs.
        #[arg(long)]
        viz: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a bundle on a dataset and write report.json / report.csv.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Threshold preset: head, hand or synthetic.
        #[arg(long, default_value = "synthetic")]
        preset: String,
        /// Explicit SDR thresholds in mm, comma separated.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[arg(long)]
        viz: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train and evaluate a grid of configurations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest; defaults to a freshly generated synthetic benchmark.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Grids to run: stages, losses, heads, layers.
        #[arg(long, value_delimiter = ',', default_value = "stages")]
        grid: Vec<String>,
        /// Layers for the layer grid (1-based).
        #[arg(long, value_delimiter = ',', default_value = "3,6,9,12")]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Generate a synthetic benchmark dataset.
    Synth {
        /// Synthesis parameters file (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        landmarks: Option<usize>,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train {
            cfg,
            manifest,
            template,
            landmarks,
        } => commands::train(&cfg, manifest, template, landmarks),
        Command::Detect {
            bundle,
            inputs,
            annotations,
            k,
            descriptors,
            viz,
            out,
        } => commands::detect(&bundle, &inputs, annotations.as_deref(), k, descriptors, viz, out),
        Command::Evaluate {
            bundle,
            manifest,
            preset,
            thresholds,
            k,
            descriptors,
            viz,
            out,
        } => commands::evaluate(&bundle, &manifest, &preset, thresholds, k, descriptors, viz, out),
        Command::Ablate {
            cfg,
            manifest,
            grid,
            layers,
            thresholds,
        } => commands::ablate(&cfg, manifest, &grid, &layers, thresholds),
        Command::Synth {
            config,
            seed,
            queries,
            landmarks,
            name,
            out,
        } => commands::synth(config.as_deref(), seed, queries, landmarks, &name, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
