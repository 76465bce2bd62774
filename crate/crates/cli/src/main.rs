// SPDX-License-Identifier: MIT OR Apache-2.0

//! `emprobe`: train the reference model, fit the probability encoding, steer
//! and prune output embeddings, and trace training dynamics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 training divergence. Failures print one line to stderr.

mod commands;
mod manifest;
mod pattern;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emprobe::prune::PruneOrder;
use emprobe::steer::{SigTransform, Softness};
use emprobe::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "emprobe", version, about = "Probe, steer and prune output-embedding probability encodings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Zipf corpus.
    Corpus(CorpusArgs),
    /// Train the reference model and write checkpoints.
    Train(TrainArgs),
    /// Accumulate averaged next-token probabilities over a corpus.
    Eval(EvalArgs),
    /// Fit the log-linear encoding of averaged probabilities.
    Fit(FitArgs),
    /// Rescale one token's probability by editing its embedding row.
    Steer(SteerArgs),
    /// Sweep saliency-ordered dimension removal.
    Prune(PruneArgs),
    /// Trace frequency encoding and convergence across checkpoints.
    Dynamics(DynamicsArgs),
    /// Run the full study end to end.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    ZipfUnigram,
    MarkovBigram,
}

#[derive(Args, Debug, Serialize)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    pub tokens: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, value_enum, default_value_t = GeneratorKind::MarkovBigram)]
    pub generator: GeneratorKind,
    #[arg(long, default_value_t = 1.0)]
    pub zipf_exponent: f64,
    /// Probability of a local move instead of a fresh Zipf draw.
    #[arg(long, default_value_t = 0.5)]
    pub mixing: f64,
    #[arg(long, default_value_t = 8)]
    pub neighbours: usize,
    #[arg(long, default_value_t = 0)]
    pub structure_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the token counts as a corpus-frequency record.
    #[arg(long)]
    pub freq_out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Model config as `key=value` lines; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus record. Without it a Markov corpus is generated from
    /// the model seed.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    pub corpus_tokens: usize,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Number of log-spaced checkpoints, first and last step included.
    #[arg(long, default_value_t = 12)]
    pub checkpoints: usize,
    /// Explicit checkpoint steps; replaces the log-spaced schedule.
    #[arg(long, value_delimiter = ',')]
    pub checkpoint_steps: Vec<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub tied: bool,
    #[arg(long)]
    pub head_bias: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus record, cut into sequences of `--seq-len` tokens.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the model context.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub max_sequences: Option<usize>,
    /// Drop each sequence's last position.
    #[arg(long)]
    pub exclude_last: bool,
    /// Probability-statistics record to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON report with held-out cross-entropy.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    /// Checkpoint whose output embedding is fitted.
    #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
    pub checkpoint: Option<PathBuf>,
    /// Embedding-matrix record, e.g. exported from another model.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub probstats: PathBuf,
    #[arg(long, default_value_t = emprobe::DEFAULT_FLOOR)]
    pub floor: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SteerArgs {
    #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
    pub checkpoint: Option<PathBuf>,
    /// Edit a bare embedding matrix; no evaluation is possible.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Fit record. Without it the fit is computed on `--detect`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Detect corpus: source of the fit when `--fit` is absent and of `e_local`.
    #[arg(long)]
    pub detect: Option<PathBuf>,
    /// Use only the first N detect sequences.
    #[arg(long)]
    pub detect_size: Option<usize>,
    /// In-domain test corpus (`e_id`).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Out-of-domain corpus (`e_ood`).
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub token: usize,
    #[arg(long)]
    pub scale: f64,
    /// Softness: a number, `inf` or `-inf`.
    #[arg(long, default_value = "2", allow_hyphen_values = true)]
    pub b: Softness,
    #[arg(long, default_value = "one_minus_p")]
    pub sig_transform: SigTransform,
    #[arg(long)]
    pub exclude_last: bool,
    #[arg(long, default_value_t = emprobe::DEFAULT_FLOOR)]
    pub floor: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fit record giving the saliency.
    #[arg(long, conflicts_with = "probstats", required_unless_present = "probstats")]
    pub fit: Option<PathBuf>,
    /// Fit the checkpoint's output embedding on these statistics instead.
    #[arg(long)]
    pub probstats: Option<PathBuf>,
    /// Evaluation corpus for the KL and the generation prefixes.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub exclude_last: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value = "ascending")]
    pub order: PruneOrder,
    /// Seed of the random order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generations for the similarity proxy; 0 skips it.
    #[arg(long, default_value_t = 512)]
    pub gen_samples: usize,
    #[arg(long, default_value_t = 64)]
    pub gen_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub gen_seed: u64,
    #[arg(long, default_value_t = emprobe::DEFAULT_FLOOR)]
    pub floor: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DynamicsArgs {
    /// Checkpoint files; `*` and `?` are expanded in the file name.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<String>,
    /// Corpus or corpus-frequency record of the training data.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = emprobe::DEFAULT_FLOOR)]
    pub floor: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with a full pipeline config; flags above override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::NotAStoreFile | Error::UnknownKind(_) | Error::VersionMismatch { .. } | Error::Truncated(_) => "format",
        Error::WrongKind { .. } => "wrong_kind",
        Error::Invariant(_) => "invariant",
        Error::Shape(_) => "shape",
        Error::RankDeficient(_) => "rank_deficient",
        Error::Degenerate(_) => "degenerate",
        Error::OutOfRange { .. } => "out_of_range",
        Error::Config(_) => "config",
        Error::Diverged { .. } => "diverged",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus(a) => commands::corpus(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Steer(a) => commands::steer(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Dynamics(a) => commands::dynamics(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("emprobe: error[{}] exit={code}: {msg}", kind(&e));
            ExitCode::from(code)
        }
    }
}
