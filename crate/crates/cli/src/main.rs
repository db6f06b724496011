//! `sig`: ingest corpora, build splits, train, predict, evaluate and plot.
//!
//! Every command that writes an output directory also writes `run.json`
//! with its parameters and the SHA-256 of its inputs and outputs. The
//! remote LLM credential is read from `SIG_LLM_API_KEY`.

mod commands;
mod config;
mod manifest;
mod remote;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sig", version, about = "Speaker attribution by generation")]
struct Cli {
    #[command(flatten)]
    run: RunConfig,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Pdnc,
    Wp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Protocol {
    CrossDomain,
    InDomain,
    Holdout,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClientKind {
    Stub,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Style {
    Plain,
    Cot,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize an annotated corpus and drop minor speakers.
    Ingest {
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long)]
        input: PathBuf,
        /// Minimum quotations per speaker within a novel.
        #[arg(long, default_value_t = 10)]
        min_speaker_quotes: usize,
    },
    /// Write the synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 4)]
        novels: usize,
        #[arg(long, default_value_t = 130)]
        quotes_per_novel: usize,
    },
    /// Write train/test splits.
    Split {
        #[arg(long, value_enum, default_value = "cross-domain")]
        protocol: Protocol,
        /// Held-out fraction for the holdout protocol.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Print corpus statistics, per side when a split is given.
    Stats,
    /// Fine-tune a backend on one fold.
    Train {
        #[arg(long)]
        resume: bool,
    },
    /// Rank or generate speakers for the test side of one fold.
    Predict,
    /// Score prediction directories and aggregate across folds.
    Evaluate {
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
    },
    /// t-SNE plot of speaker-name embeddings.
    Viz {
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
    },
    /// Zero-shot baseline scored with lenient matching.
    Llm {
        #[arg(long, value_enum, default_value = "stub")]
        client: ClientKind,
        /// Canned responses for the stub client.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Stub answers with the gold speaker.
        #[arg(long)]
        gold: bool,
        #[arg(long, value_enum, default_value = "plain")]
        style: Style,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value = "https://api.openai.com/v1")]
        endpoint: String,
        #[arg(long, default_value = "gpt-3.5-turbo")]
        model: String,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long, default_value_t = 0)]
        requests_per_minute: u32,
    },
    /// Train and evaluate the encoder classifier on one in-domain fold.
    Encoder,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = cli.run.resolve().and_then(|run| commands::dispatch(&run, cli.command));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
