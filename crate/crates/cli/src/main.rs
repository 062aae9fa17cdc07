//! `seqrl` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "seqrl",
    version,
    about = "Train and evaluate small translation models with MLE and policy gradients"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct GlobalArgs {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build source and target vocabularies from the training corpus.
    MakeVocab,
    /// Train a model by maximum likelihood.
    TrainMle {
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune a model with the mixed MLE/RL objective.
    TrainRl {
        #[arg(long)]
        init: PathBuf,
    },
    /// Translate a file with beam search.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        beam_width: usize,
        /// Defaults to the model's configured decoding limit.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Pair source-side monolingual sentences with beam-searched targets.
    PseudoTargets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Pair target-side monolingual sentences with sources from a reverse model.
    BackTranslate {
        /// A target-to-source checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Merge bilingual and pseudo-parallel corpora into one shuffled corpus.
    Unify {
        /// Prefix of a corpus written by `pseudo-targets`.
        #[arg(long)]
        pseudo_src: Option<PathBuf>,
        /// Prefix of a corpus written by `back-translate`.
        #[arg(long)]
        pseudo_tgt: Option<PathBuf>,
    },
    /// Run the brute-force oracle self-checks.
    Verify,
    /// RL fine-tuning at each mixing weight, reporting dev and test BLEU.
    SweepAlpha {
        /// MLE checkpoint to start every run from; trained first when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9")]
        alphas: Vec<f64>,
    },
    /// Write a synthetic parallel corpus.
    GenToy {
        /// copy, substitution or reversed-substitution
        #[arg(long, default_value = "copy")]
        task: String,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 8)]
        alphabet: usize,
        #[arg(long, default_value_t = 1)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        /// Files are written as `<out>/<name>.src` and `<out>/<name>.tgt`.
        #[arg(long, default_value = "train")]
        name: String,
    },
}

/// Configuration mistakes exit with 1, everything else with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    let is_config = err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<seqrl::Error>(),
            Some(seqrl::Error::Config { .. } | seqrl::Error::InvalidModelConfig(_))
        )
    });
    if is_config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // some library errors already embed their cause in the message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
