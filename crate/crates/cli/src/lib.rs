//! Experiment runner for otflow: training, transport, evaluation and
//! plotting from the command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O
//! error.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use commands::{EvalArgs, GenDataArgs, Protocol, TransportArgs};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "otflow", version, about = "Learn optimal-transport maps with invertible flows")]
pub struct Cli {
    /// Seed for every random draw made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON experiment config.
    Train { config: PathBuf },
    /// Push a cloud through a trained model.
    Transport {
        checkpoint: PathBuf,
        input: PathBuf,
        /// Apply the inverse map instead.
        #[arg(long)]
        inverse: bool,
        /// Write every partial composition as stage_0.csv ..= stage_M.csv.
        #[arg(long)]
        intermediates: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare an intermediate output with the Gaussian barycenter.
    Barycenter {
        checkpoint: PathBuf,
        /// Source Gaussian as JSON {"mean": [..], "covariance": [[..]]}.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Number of leading units to apply.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
    },
    /// Report transport metrics of a model on a source/target pair.
    Eval {
        checkpoint: PathBuf,
        x: PathBuf,
        y: PathBuf,
        /// File with one target index per source point; enables k-NN accuracy.
        #[arg(long)]
        pairing: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        slices: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 10])]
        k: Vec<usize>,
    },
    /// Check loss gradients against finite differences on a tiny instance.
    Gradcheck {
        /// Take the model and loss settings from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Draw clouds as an SVG scatter plot, one colored layer per cloud.
    Plot {
        #[arg(required = true)]
        clouds: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Project on the two leading principal axes first.
        #[arg(long)]
        pca: bool,
    },
    /// Generate synthetic point clouds.
    GenData {
        /// Shape spec as inline JSON or a path to a JSON file.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Dimension of the embedding protocol.
        #[arg(long, default_value_t = 10)]
        dim: usize,
        /// Noise std of the embedding protocol.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::invalid(format!("--threads: {e}")))?;
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train { config } => commands::train_cmd(config, cli.seed, cli.out_dir.as_deref()),
        Command::Transport {
            checkpoint,
            input,
            inverse,
            intermediates,
            output,
        } => commands::transport_cmd(
            TransportArgs {
                checkpoint,
                input,
                inverse: *inverse,
                intermediates: *intermediates,
                output: output.as_deref(),
            },
            &out_dir,
        ),
        Command::Barycenter {
            checkpoint,
            source,
            target,
            m,
            samples,
        } => commands::barycenter_cmd(checkpoint, source, target, *m, *samples, seed),
        Command::Eval {
            checkpoint,
            x,
            y,
            pairing,
            slices,
            k,
        } => commands::eval_cmd(
            EvalArgs {
                checkpoint,
                x,
                y,
                pairing: pairing.as_deref(),
                slices: *slices,
                k,
            },
            seed,
        ),
        Command::Gradcheck {
            config,
            tolerance,
            corrupt_gradient,
        } => commands::gradcheck_cmd(config.as_deref(), *tolerance, *corrupt_gradient, seed),
        Command::Plot { clouds, output, pca } => commands::plot_cmd(clouds, output, *pca),
        Command::GenData {
            spec,
            protocol,
            n,
            dim,
            noise,
            output,
        } => commands::gen_data_cmd(
            GenDataArgs {
                spec: spec.as_deref(),
                protocol: *protocol,
                n: *n,
                dim: *dim,
                noise: *noise,
                output: output.as_deref(),
            },
            cli.seed,
            Path::new(&out_dir),
        ),
    }
}
