//! Command-line front end: training runs, evaluation, the component ablation,
//! standalone label propagation, plots and dataset generation.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod plot;

pub use commands::{ablation_configs, ABLATION_NAMES};

#[derive(Debug, Parser)]
#[command(name = "simmatch", version, about = "Graph-consistency semi-supervised training on vector data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, resolved config, checkpoint and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `seed` key of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the EMA accuracy of a checkpoint on the labeled rows of a CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the five cumulative component configurations over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Propagate labels over an affinity matrix and print the result as CSV.
    Propagate {
        #[arg(long)]
        affinity: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, conflicts_with = "closed")]
        iters: Option<usize>,
        #[arg(long)]
        closed: bool,
    },
    /// Write an SVG of accuracy curves or of a 2-D decision boundary.
    Plot {
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotKind::Curves)]
        kind: PlotKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a synthetic dataset as CSV.
    Gen {
        #[arg(long, value_enum)]
        dataset: GenDataset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Curves,
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenDataset {
    TwoMoons,
    Circles,
    Blobs,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or inputs: exit 2.
    Usage(String),
    /// Anything that went wrong while running: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub(crate) fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<simmatch_core::Error> for CliError {
    fn from(e: simmatch_core::Error) -> Self {
        use simmatch_core::Error as E;
        match e {
            E::Config { .. } | E::Parse { .. } => CliError::usage(e),
            other => CliError::runtime(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Eval { checkpoint, data } => commands::eval(&checkpoint, &data),
        Command::Ablate { config, out, seeds } => commands::ablate(&config, &out, seeds),
        Command::Propagate {
            affinity,
            labels,
            alpha,
            iters,
            closed,
        } => commands::propagate(&affinity, &labels, alpha, iters, closed),
        Command::Plot {
            metrics,
            out,
            kind,
            checkpoint,
            data,
        } => match kind {
            PlotKind::Curves => plot::curves(&metrics, &out),
            PlotKind::Boundary => plot::boundary(checkpoint.as_deref(), data.as_deref(), &out),
        },
        Command::Gen {
            dataset,
            out,
            n,
            noise,
            classes,
            seed,
        } => commands::gen(dataset, &out, n, noise, classes, seed),
    }
}
