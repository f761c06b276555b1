use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hardcase_cli::{execute, Command, Invocation, Overrides};

#[derive(Parser)]
#[command(name = "hardcase", version, about = "Difficulty-bucketed curriculum training for imitation-learned planners")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "configs/smoke.config")]
    config: PathBuf,
    /// Output root holding the stage directories.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Replace stage outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Restrict train-agent / eval to these variants; an unknown name is
    /// read as a strategy kind and added to the sweep.
    #[arg(long, global = true)]
    strategy: Vec<String>,
    /// Number of agent seeds in the sweep.
    #[arg(long, global = true)]
    seeds: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the train, validation and test corpora.
    GenData,
    /// Run the planner profiles on the training corpus.
    Label,
    TrainEmbedding,
    TrainDifficulty,
    /// Score every corpus with the difficulty model.
    Score,
    /// Decile buckets, test sets and the validation set.
    Bucketize,
    TrainAgent,
    Eval,
    Report,
    /// Every stage in order.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Label => Command::Label,
        Cmd::TrainEmbedding => Command::TrainEmbedding,
        Cmd::TrainDifficulty => Command::TrainDifficulty,
        Cmd::Score => Command::Score,
        Cmd::Bucketize => Command::Bucketize,
        Cmd::TrainAgent => Command::TrainAgent,
        Cmd::Eval => Command::Eval,
        Cmd::Report => Command::Report,
        Cmd::All => Command::All,
    };
    let inv = Invocation {
        config: cli.config,
        out: cli.out,
        workers: cli.workers,
        force: cli.force,
        overrides: Overrides { seed: cli.seed, seeds: cli.seeds, strategies: cli.strategy },
    };
    match execute(command, &inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
