//! The `travkit` command-line pipeline.

pub mod commands;
pub mod config;
pub mod viz;

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{EvalArgs, LabelArgs, Status, SynthArgs, TrainArgs};
use travkit_net::train::Against;

/// Exit code when some frames were skipped.
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "travkit", version, about = "Traversability pseudo-labels from camera and LiDAR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// YAML configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AgainstArg {
    Labels,
    Gt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes with ground truth and region maps.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes; more than one writes `scene_NNN` subdirectories.
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Write pseudo-labels for every frame of a dataset.
    Label {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        /// `oracle` (region maps in the dataset), `tcp://host:port`, or
        /// `stdio:<command>` to spawn a server.
        #[arg(long, default_value = "oracle")]
        backend: String,
        /// Relabel frames that already have a label.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        jobs: Option<usize>,
        /// Per-request backend timeout in seconds.
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
    },
    /// Train the segmentation network on labeled datasets.
    Train {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Label directories, one per dataset, in order.
        #[arg(long)]
        labels: Vec<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write predictions.
    Eval {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labels: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "gt")]
        against: AgainstArg,
    },
    /// Render the layers of one frame side by side.
    Viz {
        id: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Directories holding label, provenance or prediction output.
        #[arg(long, num_args = 1..)]
        artifacts: Vec<PathBuf>,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { common, seed, scenes } => {
            let roots = commands::cmd_synth(&SynthArgs { out: common.out, config: common.config, seed, scenes })?;
            for r in roots {
                println!("{}", r.display());
            }
        }
        Command::Label { dataset, common, backend, force, jobs, timeout } => {
            let (status, summary) = commands::cmd_label(&LabelArgs {
                dataset,
                out: common.out,
                config: common.config,
                backend,
                force,
                jobs,
                timeout: Duration::from_secs_f64(timeout),
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if status == Status::Partial {
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Train { datasets, common, labels, seed } => {
            let report =
                commands::cmd_train(&TrainArgs { datasets, labels, out: common.out, config: common.config, seed })?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        }
        Command::Eval { datasets, common, checkpoint, labels, against } => {
            let out = commands::cmd_eval(&EvalArgs {
                datasets,
                labels,
                checkpoint,
                out: common.out,
                config: common.config,
                against: match against {
                    AgainstArg::Labels => Against::Labels,
                    AgainstArg::Gt => Against::Gt,
                },
            })?;
            println!("{}", serde_json::to_string_pretty(&out.report.metrics)?);
        }
        Command::Viz { id, dataset, artifacts, out } => {
            let drawn = viz::cmd_viz(&viz::VizArgs { id, dataset, artifacts, out })?;
            println!("{}", drawn.join(" "));
        }
    }
    Ok(0)
}
