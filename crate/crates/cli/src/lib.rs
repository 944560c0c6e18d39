//! Command-line orchestration: data generation, pretraining, editing runs,
//! the ablation grid and report aggregation.

mod ablate;
mod edit;
mod gen_data;
pub mod manifest;
mod pretrain;
pub mod protocol;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use ablate::{ablation_variants, AblationVariant};
pub use edit::{build_edit_config, EditFlags};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const NUMERICAL: u8 = 2;
    pub const PARTIAL: u8 = 3;
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: exit::CONFIG,
            error: error.into(),
        }
    }

    pub fn partial(message: String) -> Self {
        Self {
            code: exit::PARTIAL,
            error: anyhow::anyhow!(message),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let numerical = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<ovtlab_core::Error>(), Some(ovtlab_core::Error::Diverged { .. })));
        Self {
            code: if numerical { exit::NUMERICAL } else { exit::CONFIG },
            error,
        }
    }
}

impl From<ovtlab_core::Error> for Failure {
    fn from(error: ovtlab_core::Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

#[derive(Debug, Parser)]
#[command(name = "ovtlab", version, about = "Knowledge-editing laboratory on a tiny transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world, its corpus, vocabulary and edit requests.
    GenData(GenDataArgs),
    /// Pretrain the language model on a generated corpus.
    Pretrain(PretrainArgs),
    /// Run edits from a request file and evaluate them.
    Edit(EditArgs),
    /// Run the objective ablation grid.
    Ablate(AblateArgs),
    /// Aggregate metrics and loss curves across run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub entities: usize,
    #[arg(long, default_value_t = 8)]
    pub relations: usize,
    #[arg(long, default_value_t = 400)]
    pub facts: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON with optional "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ftm,
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Overtone,
}

/// Inputs shared by edit and ablate.
#[derive(Clone, Debug, Args)]
pub struct RunInputs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub requests: PathBuf,
    /// Defaults to vocab.txt next to the request file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// First request to use.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// Number of requests to use (all remaining by default).
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub inputs: RunInputs,
    #[command(flatten)]
    pub flags: EditFlags,
    #[arg(long, value_enum, default_value_t = LossArg::Overtone)]
    pub loss: LossArg,
    /// Edits per continual sequence.
    #[arg(long, default_value_t = 1, value_parser = parse_seq_len)]
    pub seq_len: usize,
    /// Write each edited model (adapters merged) as a checkpoint.
    #[arg(long)]
    pub save_checkpoints: bool,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: RunInputs,
    #[command(flatten)]
    pub flags: EditFlags,
    /// Comma-separated initialization seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory containing run directories (searched two levels deep).
    #[arg(long)]
    pub runs: PathBuf,
    /// report.csv or report.json.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => gen_data::run(&a),
        Command::Pretrain(a) => pretrain::run(&a),
        Command::Edit(a) => edit::run(&a),
        Command::Ablate(a) => ablate::run(&a),
        Command::Report(a) => report::run(&a),
    }
}

fn parse_seq_len(s: &str) -> Result<usize, String> {
    match s {
        "1" | "10" | "100" => Ok(s.parse().expect("listed value")),
        _ => Err(format!("{s} is not one of 1, 10, 100")),
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
pub(crate) fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

pub(crate) fn read_json_file(path: &std::path::Path) -> anyhow::Result<serde_json::Value> {
    use anyhow::Context;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
