use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsplit::experiment::{
    cmd_partition, cmd_report, cmd_run, cmd_sweep_cut, cmd_verify, RunOptions, VerifyOptions,
};
use fedsplit::FedError;

/// Deterministic federated and split-learning simulator.
#[derive(Debug, Parser)]
#[command(name = "fedsplit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured seed and write results, ledgers and embeddings.
    Run(ConfigArgs),
    /// Print institution sizes and the pairwise KS matrix of a partition.
    Partition(ConfigArgs),
    /// Train a split strategy at every cut index and tabulate the metric.
    SweepCut(ConfigArgs),
    /// Run the built-in correctness suite.
    Verify {
        /// Flip one analytic gradient's sign (checks that the suite can fail).
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Summarize one or more results.json files (or directories holding one).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write the merged results.json and results.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Run this seed only, replacing the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent seeds (sweep-cut: independent cuts).
    #[arg(long, default_value_t = 1)]
    parallel_seeds: usize,
}

impl ConfigArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            out: self.out.clone(),
            parallel_seeds: self.parallel_seeds,
        }
    }
}

fn run(cli: Cli) -> Result<bool, FedError> {
    match cli.command {
        Command::Run(a) => {
            let outcome = cmd_run(&a.config, &a.options())?;
            println!("{outcome}");
        }
        Command::Partition(a) => println!("{}", cmd_partition(&a.config, &a.options())?),
        Command::SweepCut(a) => {
            let (report, path) = cmd_sweep_cut(&a.config, &a.options())?;
            println!("{report}\nwrote {}", path.display());
        }
        Command::Verify { inject_sign_flip } => {
            let report = cmd_verify(&VerifyOptions {
                inject_sign_flip,
                ..Default::default()
            })?;
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Report { inputs, out } => println!("{}", cmd_report(&inputs, out.as_deref())?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSPLIT_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
