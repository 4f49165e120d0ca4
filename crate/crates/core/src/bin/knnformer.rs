use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use knnformer::cli::{cmd_eval, cmd_grid, cmd_predict, cmd_synth, cmd_train, Overrides, RunConfig};
use knnformer::model::Ablation;

#[derive(Parser)]
#[command(name = "knnformer", version, about = "Layout-aware entity classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the corpus split and save the best checkpoint.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Label every document of the corpus.
    Predict,
    /// Write a synthetic annotation file.
    Synth,
    /// Hyper-parameter grid search.
    Grid,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true, env = "KNNFORMER_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "KNNFORMER_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "KNNFORMER_CORPUS")]
    corpus: Option<PathBuf>,
    #[arg(long, global = true, env = "KNNFORMER_EMBEDDINGS")]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true, env = "KNNFORMER_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, env = "KNNFORMER_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "KNNFORMER_NO_MATCHING")]
    no_matching: bool,
    /// hop, local, sigma, matching or abspos; repeatable.
    #[arg(long, global = true, value_delimiter = ',', env = "KNNFORMER_ABLATE")]
    ablate: Vec<String>,
}

fn run(cli: Cli) -> knnformer::Result<serde_json::Value> {
    let c = cli.common;
    let ablate = c
        .ablate
        .iter()
        .map(|s| s.parse::<Ablation>())
        .collect::<knnformer::Result<Vec<_>>>()?;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: c.seed,
        corpus: c.corpus,
        embeddings: c.embeddings,
        checkpoint: c.checkpoint,
        out: c.out,
        no_matching: c.no_matching,
        ablate,
    });
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Synth => cmd_synth(&cfg),
        Command::Grid => cmd_grid(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(v) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}", serde_json::json!({"error": msg}));
            ExitCode::FAILURE
        }
    }
}
