use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gppsrl_cli::{execute, Command, Invocation};

#[derive(Parser)]
#[command(name = "gppsrl", version, about = "Posterior sampling RL with Gaussian-process dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run every configured kernel over all seeds and write regret and trajectory logs.
    Run(Common),
    /// Sweep the episode horizon for one kernel and fit the regret slope.
    SweepHorizon(Common),
    /// Greedy maximum information gain per kernel.
    Infogain(Common),
    /// Check the analysis bounds against logged runs and fresh samples.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Sub::Run(c) => (Command::Run, c),
        Sub::SweepHorizon(c) => (Command::SweepHorizon, c),
        Sub::Infogain(c) => (Command::Infogain, c),
        Sub::Verify(c) => (Command::Verify, c),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = Invocation::load(&common.config, common.out, common.seed).and_then(|inv| execute(cmd, &inv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
