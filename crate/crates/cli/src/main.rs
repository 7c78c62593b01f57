mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::CliError;

/// Listwise reranking: generate data, train, rerank, evaluate.
#[derive(Parser, Debug)]
#[command(name = "listrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (train.jsonl, eval.jsonl, qrels.txt, vocab.json) into --data.
    Gen(Opts),
    /// Train on --data/train.jsonl and write --checkpoint.
    Train(Opts),
    /// Rerank --data/eval.jsonl with --checkpoint and write a TREC run to --run.
    Rerank(Opts),
    /// Score --run against --qrels with NDCG@10.
    Eval(Opts),
    /// Time both strategies over growing candidate lists; CSV to --report.
    Bench(Opts),
    /// Rerank under original, reversed and shuffled candidate order; CSV to --report.
    Bias(Opts),
}

/// Every subcommand accepts the same options and uses the ones it needs.
#[derive(Args, Debug, Default)]
pub struct Opts {
    /// Flat `key = value` file; keys are long flag names. Flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Output report (train log, eval JSON, bench or bias CSV).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seed for data generation, initialisation and batch order [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Candidates per listwise input (M) [default: 20, or the checkpoint's]
    #[arg(long)]
    window_size: Option<usize>,
    /// global_score or sliding_window [default: global_score]
    #[arg(long)]
    strategy: Option<String>,
    /// Sliding-window step [default: 10]
    #[arg(long)]
    stride: Option<usize>,
    /// Variance threshold of the calibration gate [default: 10]
    #[arg(long)]
    tau: Option<f64>,
    /// Multiplier on the calibration term [default: 1]
    #[arg(long)]
    calibration_weight: Option<f64>,
    /// [default: 3]
    #[arg(long)]
    epochs: Option<usize>,
    /// Queries per step [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_point_loss: bool,
    #[arg(long)]
    no_calibration: bool,
    #[arg(long)]
    no_in_batch: bool,
    #[arg(long)]
    no_adaptive: bool,
    /// Rank by point-view scores instead of list-view scores.
    #[arg(long)]
    use_point_scores: bool,
    /// [default: 2000]
    #[arg(long)]
    train_queries: Option<usize>,
    /// [default: 200]
    #[arg(long)]
    eval_queries: Option<usize>,
    /// Candidates per eval query [default: 100]
    #[arg(long)]
    eval_candidates: Option<usize>,
    /// Adjacent-swap rate of training labels [default: 0.05]
    #[arg(long)]
    noise: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    d_model: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// [default: 256]
    #[arg(long)]
    d_ff: Option<usize>,
    /// Candidate truncation length [default: 16]
    #[arg(long)]
    max_candidate_tokens: Option<usize>,
    /// Comma-separated candidate counts for bench [default: 100,200,400,800,1000]
    #[arg(long)]
    sizes: Option<String>,
    /// Timed runs per size [default: 3]
    #[arg(long)]
    repetitions: Option<usize>,
    /// Run tag written in the last column [default: listrank]
    #[arg(long)]
    tag: Option<String>,
    /// Print training progress every this many steps, 0 = quiet [default: 0]
    #[arg(long)]
    log: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(o) => commands::gen(&o),
        Command::Train(o) => commands::train(&o),
        Command::Rerank(o) => commands::rerank(&o),
        Command::Eval(o) => commands::eval(&o),
        Command::Bench(o) => commands::bench(&o),
        Command::Bias(o) => commands::bias(&o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
