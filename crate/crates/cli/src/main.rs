//! `depthdecomp`: dataset generation, training, evaluation and reporting.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "depthdecomp", version, about = "Depth-map decomposition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `KEY=VALUE` override, applied after the config file.
    #[arg(long = "override", value_name = "K=V")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData(Common),
    /// Train a variant and write a result bundle.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        /// Dataset directory; overrides `dataset` from the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue an interrupted run in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        protocol: String,
        /// Model checkpoint; predictions are written under `--out`.
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory of predicted rasters (instead of a checkpoint).
        #[arg(long, conflicts_with = "checkpoint", requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth rasters.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_parser = parse_range, default_value = "0.001,10")]
        depth_range: (f64, f64),
    },
    /// Predict gradients, normalized and metric depth for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth depth raster for an error map.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_range, default_value = "0.001,10")]
        depth_range: (f64, f64),
    },
    /// Split a depth raster into normalized depth, statistics and gradients.
    Decompose {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalize the inverted map instead of the original one.
        #[arg(long)]
        inverted: bool,
    },
    /// Compare result bundles in a table and plot validation curves.
    Report {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo > 0.0 && hi > lo) {
        return Err("need 0 < LO < HI".into());
    }
    Ok((lo, hi))
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("DEPTHDECOMP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("DEPTHDECOMP_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train { common, variant, dataset, resume, max_epochs } => {
            commands::train(&common, variant, dataset, resume, max_epochs)
        }
        Command::Eval { out, protocol, checkpoint, dataset, split, pred, gt, depth_range } => {
            commands::eval(&commands::EvalArgs {
                out,
                protocol,
                checkpoint,
                dataset,
                split,
                pred,
                gt,
                depth_range,
            })
        }
        Command::Predict { checkpoint, image, gt, out, depth_range } => {
            commands::predict(&checkpoint, &image, gt.as_deref(), &out, depth_range)
        }
        Command::Decompose { depth, out, inverted } => commands::decompose(&depth, &out, inverted),
        Command::Report { bundles, out } => commands::report(&bundles, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
