use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sscl_harness::verify::{run_verify, Implementations};
use sscl_harness::{cmd_ablate, cmd_data_gen, cmd_run, parse_config, RunOptions};

#[derive(Parser)]
#[command(name = "sscl", version, about = "Semi-supervised contrastive learning experiments")]
struct Cli {
    /// Overrides `train.seed`; further repeats use consecutive seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of every file the command writes.
    #[arg(long, global = true, env = "SSCL_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Parallel training runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and summarize the final metrics.
    Run { config: PathBuf },
    /// Sweep the `sweep.*` keys of an experiment.
    Ablate { config: PathBuf },
    /// Run the seeded property suites.
    Verify,
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write the dataset snapshot of an experiment.
    Gen { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = RunOptions {
        out_dir: cli.out_dir,
        seed: cli.seed,
        jobs: cli.jobs,
    };
    let result = match &cli.command {
        Command::Run { config } => parse_config(config).and_then(|s| cmd_run(&s, &opts)).map(|_| true),
        Command::Ablate { config } => parse_config(config).and_then(|s| cmd_ablate(&s, &opts)).map(|_| true),
        Command::Data {
            command: DataCommand::Gen { config },
        } => parse_config(config).and_then(|s| cmd_data_gen(&s, &opts)).map(|_| true),
        Command::Verify => run_verify(&Implementations::default(), &mut std::io::stdout()).map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
