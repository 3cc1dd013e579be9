//! `bistil`: command-line driver for bilingual distillation.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Training(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
        }
    }
}

impl From<bistil::Error> for CliError {
    fn from(e: bistil::Error) -> Self {
        match e {
            bistil::Error::Config(_) => CliError::Usage(e.to_string()),
            bistil::Error::Training { .. } => CliError::Training(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Training(m) => write!(f, "training error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "bistil",
    version,
    about = "Distil a multilingual encoder into a small bilingual one",
    after_help = "Exit status: 0 success, 1 usage error, 2 data error, 3 training error.\n\
                  Every setting can come from a `key = value` file given with --config; flags win.\n\
                  BISTIL_THREADS caps the evaluation thread count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (default 42).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct Training {
    /// Training steps (per phase for sparse fine-tuning).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validation cadence in steps.
    #[arg(long)]
    eval_interval: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multilingual corpus and topic task.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long)]
        lines: Option<usize>,
        /// Fraction of concepts the two languages spell identically.
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        topics: Option<usize>,
    },
    /// Pretrain the multilingual MLM teacher.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// Pretraining corpus, one sequence per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        ffn: Option<usize>,
        #[arg(long)]
        max_seq_len: Option<usize>,
        #[arg(long)]
        dropout: Option<f32>,
    },
    /// Train a language SFT for the teacher on monolingual text.
    TrainLangSft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Fraction of encoder parameters the delta may touch.
        #[arg(long)]
        density: Option<f64>,
    },
    /// Train a task SFT (with head) for the teacher.
    TrainTaskSft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Language SFT applied while training (repeatable).
        #[arg(long)]
        lang_sft: Vec<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// tokens, pairs or spans.
        #[arg(long)]
        task_kind: Option<String>,
        #[arg(long)]
        density: Option<f64>,
    },
    /// Stage one: general bilingual distillation.
    DistilGeneral {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Source then target language SFT.
        #[arg(long)]
        lang_sft: Vec<PathBuf>,
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        tgt: Option<PathBuf>,
        /// Layer reduction factor.
        #[arg(long)]
        lrf: Option<usize>,
        #[arg(long)]
        vocab_threshold: Option<f64>,
    },
    /// Stage two: task-specific distillation into a student task SFT.
    DistilTask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Language SFTs applied to the teacher (repeatable).
        #[arg(long)]
        lang_sft: Vec<PathBuf>,
        /// The teacher's task SFT.
        #[arg(long)]
        task_sft: Option<PathBuf>,
        /// Stage-one student checkpoint.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        task_kind: Option<String>,
        #[arg(long)]
        density: Option<f64>,
    },
    /// Score a model plus SFTs on a task file.
    ///
    /// Writes `eval.tsv` with columns metric, value, count, then one
    /// `class:<label>` row per class or extra metric.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        lang_sft: Vec<PathBuf>,
        #[arg(long)]
        task_sft: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        task_kind: Option<String>,
    },
    /// Measure parameters, FLOPs and CPU time per example.
    ///
    /// Writes `bench.tsv` with columns name, params, flops, seconds,
    /// params_ratio, flops_ratio, speed_ratio (ratios against --reference).
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task_sft: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        reference_task_sft: Option<PathBuf>,
        /// Text file whose lines form the timing sample.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bistil: {e}");
            ExitCode::from(e.code())
        }
    }
}
