//! `moonlite` command-line pipeline.
//!
//! Exit status: 0 on success, 2 on usage or configuration errors, 1 when a
//! command fails at run time.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "moonlite",
    version,
    about = "Reasoning-aware multimodal product embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by the commands that build a model.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key=value` config file (for example a run's `config.echo`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic product universe and triplets.
    GenData(commands::GenDataArgs),
    /// Supervised stage: rationale prediction plus contrastive alignment.
    TrainSft(commands::TrainSftArgs),
    /// Joint contrastive and policy-optimization stage from an SFT checkpoint.
    TrainRl(commands::TrainRlArgs),
    /// Write product embeddings and, optionally, their rationales.
    Embed(commands::EmbedArgs),
    /// Retrieval, classification and attribute-prediction report.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainSft(a) => commands::train_sft(a),
        Command::TrainRl(a) => commands::train_rl(a),
        Command::Embed(a) => commands::embed(a),
        Command::Eval(a) => commands::eval(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
