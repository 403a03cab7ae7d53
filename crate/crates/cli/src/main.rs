//! `msync`: chunk derivation, chunker training, language-model pretraining,
//! representation extraction, downstream tagging and probing.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::Failure;

#[derive(Parser, Debug)]
#[command(name = "msync", version, about = "Shallow-syntax toolkit and chunk-conditioned language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice in the run.
    #[arg(long, default_value_t = 13, global = true)]
    pub seed: u64,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, applied after --config (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for per-sentence prediction.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert bracketed trees to a three-column chunk file.
    DeriveChunks {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CRF chunker.
    ChunkerTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chunk raw text (one sentence per line).
    ChunkerPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the chunker on a labelled file.
    ChunkerEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also write the scores to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a language model.
    Pretrain {
        /// Raw text, one sentence per line.
        #[arg(long)]
        train: PathBuf,
        /// Chunk file parallel to --train.
        #[arg(long, conflicts_with = "chunker")]
        chunks: Option<PathBuf>,
        /// Chunker checkpoint used to chunk --train on the fly.
        #[arg(long)]
        chunker: Option<PathBuf>,
        /// baseline, end_to_end, frozen or fine_tuned.
        #[arg(long)]
        scheme: Option<String>,
        /// Baseline checkpoint for the frozen and fine_tuned schemes.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-layer token representations as JSON lines.
    ExtractReps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "chunker")]
        chunks: Option<PathBuf>,
        #[arg(long)]
        chunker: Option<PathBuf>,
        /// baseline or msync.
        #[arg(long, default_value = "msync")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the BiLSTM-CRF span tagger.
    TaggerTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Language-model checkpoint for frozen representations.
        #[arg(long)]
        reps: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        chunker: Option<PathBuf>,
        /// Add chunk-tag feature embeddings.
        #[arg(long)]
        chunk_features: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained tagger on a labelled file.
    TaggerEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one linear probe per representation layer.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "msync")]
        mode: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// chunk_tags or pos_tags.
        #[arg(long)]
        task: String,
        /// Chunker for the chunk-conditioned path; gold chunks are used otherwise.
        #[arg(long)]
        chunker: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// primitives, crf, lm or all.
        #[arg(long, default_value = "all")]
        scope: String,
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
    match dispatch(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(c: &Common, command: Command) -> Result<(), Failure> {
    use commands::*;
    match command {
        Command::DeriveChunks { trees, out } => derive_chunks(c, &trees, &out),
        Command::ChunkerTrain { train, dev, out } => chunker_train(c, &train, &dev, &out),
        Command::ChunkerPredict { model, input, out } => chunker_predict(c, &model, &input, &out),
        Command::ChunkerEval { model, test, out } => chunker_eval(c, &model, &test, out.as_deref()),
        Command::Pretrain {
            train,
            chunks,
            chunker,
            scheme,
            init,
            out,
        } => pretrain(c, &train, chunks.as_deref(), chunker.as_deref(), scheme, init.as_deref(), &out),
        Command::ExtractReps {
            model,
            input,
            chunks,
            chunker,
            mode,
            out,
        } => extract_reps(c, &model, &input, chunks.as_deref(), chunker.as_deref(), &mode, &out),
        Command::TaggerTrain {
            train,
            dev,
            reps,
            mode,
            chunker,
            chunk_features,
            out,
        } => tagger_train(c, &train, &dev, reps.as_deref(), mode, chunker.as_deref(), chunk_features, &out),
        Command::TaggerEval { model, test, out } => tagger_eval(c, &model, &test, out.as_deref()),
        Command::Probe {
            model,
            mode,
            train,
            test,
            task,
            chunker,
            out,
        } => probe(c, &model, &mode, &train, &test, &task, chunker.as_deref(), &out),
        Command::Gradcheck { scope } => gradcheck(c, &scope),
    }
}
