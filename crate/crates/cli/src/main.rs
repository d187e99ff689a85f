//! `afs`: data generation, the three training stages, decoding, evaluation
//! and inspection from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "afs", version, about = "Gated speech translation pipeline at desk scale")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "AFS_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

/// Run settings layered over the defaults (or over the input checkpoint's).
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One `key=value` override; repeatable, applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write the training curve here.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Accept an input checkpoint whose architecture differs from the config.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct DecodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Hypotheses, one `id<TAB>tokens` line per record; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the corpus references in the same format.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Beam width; defaults to the checkpoint's run config.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Bleu,
    Wer,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Variant {
    T,
    Tf,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Selection {
    Afs,
    FixedRate,
    Cnn,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        records: usize,
        /// Content tokens.
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value_t = 360)]
        dim: usize,
        #[arg(long, default_value_t = 0.3)]
        silence_prob: f64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0.3)]
        reorder_prob: f64,
        /// Seed of the phone inventory and translation mapping.
        #[arg(long, default_value_t = 7)]
        inventory_seed: u64,
    },
    /// Stage 1: asr pretraining with the CTC auxiliary loss.
    TrainAsr {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage 2: insert gates and finetune with the L0 penalty.
    FinetuneAfs {
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage 3: train the st model on frozen selected features.
    TrainSt {
        /// Asr or gated checkpoint providing the front end.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        selection: Option<Selection>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the text-to-text model used by the cascade.
    TrainMt {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Translate speech with an st checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Transcribe speech with an asr (or gated) checkpoint.
    Transcribe {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Transcribe, then translate the transcript with an mt checkpoint.
    Cascade {
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        mt: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score hypotheses against references; prints the score in percent.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Exponential smoothing of zero BLEU precisions.
        #[arg(long)]
        smooth: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Expected-gate sparsity report of a gated checkpoint.
    Sparsity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoding wall-clock of a candidate st checkpoint against a baseline.
    Bench {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Use only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gates, kept positions and cross-attention for one record.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Record id.
        #[arg(long)]
        id: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Element-wise average of checkpoints with one architecture.
    AvgCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
