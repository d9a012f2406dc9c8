//! The `normsoft` command line: dataset generation, training, embedding,
//! evaluation, parameter sweeps and gradient verification.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod gradcheck;
pub mod settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<normsoft_core::Error> for CliError {
    fn from(e: normsoft_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "normsoft",
    version,
    about = "Proxy-based embedding training and retrieval evaluation"
)]
pub struct Cli {
    /// Base seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// key=value settings file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-cluster dataset as CSV.
    Gen(GenArgs),
    /// Train an embedding model and its class proxies.
    Train(TrainArgs),
    /// Embed every row of a dataset with a trained checkpoint.
    Embed(EmbedArgs),
    /// Recall@K and NMI for an embedding file.
    Eval(EvalArgs),
    /// Train and evaluate across values of one setting.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub center_scale: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Output CSV, relative to --out.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Width of a tanh hidden layer ahead of the projection; 0 for none.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub no_layer_norm: bool,
    #[arg(long)]
    pub layer_norm_eps: Option<f64>,
    /// norm-softmax, nca or lmcl.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Plain shuffled batches instead of class-balanced ones.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long)]
    pub lr_steps: Option<String>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    /// Fraction of classes active per iteration.
    #[arg(long)]
    pub subsample: Option<f64>,
    #[arg(long)]
    pub warmstart_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write sign-binarized codes.
    #[arg(long)]
    pub codes: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long)]
    pub ks: Option<String>,
    /// Shorthand for --ks 1,10,100.
    #[arg(long, conflicts_with = "ks")]
    pub sop: bool,
    /// Add metrics for sign-binarized embeddings.
    #[arg(long)]
    pub binary: bool,
    /// Normalize NMI by the geometric mean of the entropies.
    #[arg(long)]
    pub nmi_geometric: bool,
    /// k-means cluster count for NMI; 0 uses the number of labels.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// dim, subsample or samples-per-class.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values of the swept setting.
    #[arg(long)]
    pub values: Option<String>,
    /// Held-out samples per class when no --eval-data is given.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Separate evaluation dataset (e.g. unseen classes).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub ks: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, nca, norm-softmax, lmcl or subsampled.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub instances: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = commands::Common {
        seed: cli.seed,
        out: cli.out,
        config: cli.config,
    };
    match cli.command {
        Command::Gen(a) => commands::gen(&common, a),
        Command::Train(a) => commands::train(&common, a),
        Command::Embed(a) => commands::embed(&common, a),
        Command::Eval(a) => commands::eval(&common, a),
        Command::Sweep(a) => commands::sweep(&common, a),
        Command::Gradcheck(a) => commands::gradcheck(&common, a),
    }
}
