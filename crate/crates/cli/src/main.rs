use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use wasmrev_core::TaskKind;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "wasmrev", version, about = "Pre-trained multi-modal encoder for WebAssembly reverse engineering")]
pub struct Cli {
    /// Seed for every random choice; identical inputs and seed give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// File of `key = value` lines, applied as flags before the command-line ones.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a corpus of (doc, source, wasm) samples plus a project-level split.
    BuildCorpus(BuildCorpusArgs),
    /// Build the shared vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Pre-train the encoder on a corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune on a downstream task.
    Finetune(FinetuneArgs),
    /// Score a task checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Run one task checkpoint on every function of a module.
    Infer(InferArgs),
    /// Per-function report combining the available task checkpoints.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Fpi,
    Tr,
    Ws,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Fpi => TaskKind::Fpi,
            Task::Tr => TaskKind::Tr,
            Task::Ws => TaskKind::Ws,
        }
    }
}

#[derive(Args, Debug)]
pub struct BuildCorpusArgs {
    /// Generate this many synthetic samples instead of compiling sources.
    #[arg(long, conflicts_with = "from_sources", required_unless_present = "from_sources")]
    pub synthetic: Option<usize>,
    /// Line-delimited records with project_id, function_name, doc_text, source_text.
    #[arg(long)]
    pub from_sources: Option<PathBuf>,
    /// Number of synthetic functions for the task datasets (defaults to --synthetic).
    #[arg(long, requires = "synthetic")]
    pub task_functions: Option<usize>,
    #[arg(long)]
    pub cc: Option<PathBuf>,
    #[arg(long)]
    pub wasm2text: Option<PathBuf>,
    /// Comma-separated optimization levels for source mode.
    #[arg(long, value_delimiter = ',', default_value = "O0,O1,O2,O3,Os,Oz")]
    pub opt_levels: Vec<String>,
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Size cap of the documentation subword inventory, specials included.
    #[arg(long, default_value_t = 8000)]
    pub nl_cap: usize,
    /// Size cap of the source/Wasm token inventory, specials included.
    #[arg(long, default_value_t = 24000)]
    pub token_cap: usize,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 4)]
    pub ffn_multiplier: usize,
    /// Maximum input length in tokens.
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Restrict training to the train split of this split file.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Coefficient of the squared-weight penalty in the training loss.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Train one objective per step in rotation instead of all three jointly.
    #[arg(long)]
    pub round_robin: bool,
    /// Continue from the checkpoint and optimizer state saved after this epoch.
    #[arg(long)]
    pub resume: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    pub task: Task,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pre-trained checkpoint whose encoder initializes the model.
    #[arg(long, required_unless_present = "from_scratch")]
    pub init: Option<PathBuf>,
    /// Train from random initialization (supervised baseline).
    #[arg(long, conflicts_with = "init")]
    pub from_scratch: bool,
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Class names, one per line (FPI).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output vocabulary file for type recovery; built from the training set if absent.
    #[arg(long)]
    pub type_vocab: Option<PathBuf>,
    /// Hidden size of the recurrent decoder (defaults to the encoder's).
    #[arg(long)]
    pub decoder_hidden: Option<usize>,
    /// Encoder shape when training from scratch.
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    /// Stop after this many validation passes without improvement.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub task: Task,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    pub task: Task,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Module in text or binary format.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Module in text or binary format.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub fpi: Option<PathBuf>,
    #[arg(long)]
    pub tr: Option<PathBuf>,
    #[arg(long)]
    pub ws: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
}

/// Bad flags or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<wasmrev_core::Error>(), Some(wasmrev_core::Error::ToolchainMissing(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn override_repeats(cmd: clap::Command) -> clap::Command {
    cmd.args_override_self(true).mut_subcommands(override_repeats)
}

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let matches = override_repeats(Cli::command()).try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::expand_args(std::env::args_os().collect(), &["finetune", "eval", "infer"]) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
