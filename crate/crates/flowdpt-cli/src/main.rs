//! Pipeline entry point: collect → train → eval → analyze, driven by one
//! JSON config file. Exit codes: 0 success, 1 usage/config error, 2 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowdpt::cli::{
    cmd_analyze, cmd_collect, cmd_eval, cmd_init, cmd_train, EvalMode, PipelineError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "flowdpt",
    about = "In-context RL agent with a rectified-flow action head: data collection, training, evaluation and analysis",
    version
)]
struct Cli {
    /// JSON run config (see README for the schema).
    #[arg(short, long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Override a config key, e.g. --set trainer.lr=0.001 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Override the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap worker threads used for gradient computation.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect noise-distilled, relabeled shards for every registry task.
    Collect,
    /// Train (or resume) the model on the collected dataset.
    Train,
    /// Evaluate the checkpoint over the configured splits and seeds.
    Eval {
        /// online: empty FIFO context filled during deployment;
        /// offline: fixed demonstrator prompt.
        #[arg(long, value_enum, default_value = "online")]
        mode: Mode,
        /// Demonstrator transitions in the offline prompt.
        #[arg(long)]
        prompt_size: Option<usize>,
    },
    /// Demonstration-count sweep and posterior-contraction analysis.
    Analyze,
    /// Write a starter registry.json + config.json into a directory.
    Init {
        #[arg(default_value = ".")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Online,
    Offline,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Init { dir } = &cli.command {
        let seed = cli.seed.unwrap_or(0);
        return cmd_init(dir, seed);
    }
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(jobs) = cli.jobs {
        sets.push(format!("trainer.jobs={jobs}"));
    }
    match &cli.command {
        Command::Collect => {
            cmd_collect(&RunConfig::load(&cli.config, &sets)?)?;
        }
        Command::Train => {
            cmd_train(&RunConfig::load(&cli.config, &sets)?)?;
        }
        Command::Eval { mode, prompt_size } => {
            if let Some(k) = prompt_size {
                sets.push(format!("inference.prompt_size={k}"));
            }
            let mode = match mode {
                Mode::Online => EvalMode::Online,
                Mode::Offline => EvalMode::Offline,
            };
            cmd_eval(&RunConfig::load(&cli.config, &sets)?, mode)?;
        }
        Command::Analyze => {
            cmd_analyze(&RunConfig::load(&cli.config, &sets)?)?;
        }
        Command::Init { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version print and exit cleanly; usage errors are code 1
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
