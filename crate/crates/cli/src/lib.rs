//! The `mvsv` command line: synthetic data generation, trial lists, training,
//! evaluation and single-pair verification, all driven by one config file.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mvsv::error::{Error, ErrorKind};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mvsv", version, about = "Audio-visual speaker verification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, e.g. `--set train.lr=0.01`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, default_value_t = 0, global = true)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample verification trials from the held-out videos.
    Trials {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Conditions to write, each as its own block of the same pairs.
        #[arg(long, value_delimiter = ',', default_value = "AA,VV,AVAV,AV_X,A_AV,V_AV")]
        conditions: Vec<String>,
    },
    /// Train one topology and write a checkpoint plus its loss log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// unimodal-a, unimodal-v, midfusion or multiview.
        #[arg(long)]
        topology: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs to reach; overrides train.max_epochs, also on resume.
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss log CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score trials with named checkpoints and write score files and a report.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `tag=path`; may repeat.
        #[arg(long = "checkpoints", value_name = "TAG=PATH", num_args = 1.., required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Conditions to score every trial pair under; default: the trial file's tags.
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<String>,
        /// Fusion recipe `tag[:COND]+tag[:COND]...`; may repeat.
        #[arg(long)]
        fuse: Vec<String>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Score one enrol/test pair and accept or reject it.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Utterance id in the dataset, or a 16-bit mono wav file.
        #[arg(long)]
        enrol: String,
        #[arg(long)]
        test: String,
        #[arg(long, default_value = "AA")]
        condition: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data | ErrorKind::Shape => 3,
        ErrorKind::Capability => 4,
        ErrorKind::Numerical => 5,
    }
}

/// Parses the config, applies overrides and runs the command on a pool of
/// `--threads` workers. Normal output goes to `out`.
pub fn run(cli: Cli, out: &mut (dyn std::io::Write + Send)) -> mvsv::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.common.overrides.iter().map(String::as_str))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| commands::dispatch(&cfg, cli.command, out))
}
