use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use preobs::{cmd_estimate, cmd_montecarlo, cmd_simulate, cmd_verify, scenario, Options};

#[derive(Parser)]
#[command(name = "preobs", version, about = "Preintegration and PEBO state estimation scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    scenario: String,
    /// Output directory (default: $PREOBS_OUT/<name>, else ./out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "PREOBS_OUT", hide = true)]
    out_root: Option<PathBuf>,
    /// Overrides the scenario noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate truth and measurement files.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run estimators and write a report.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// One of batch, batch-hard, pebo, pebo-weighted, observer, manifold-pebo, manifold-preint.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Evaluate the equivalence identities and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Replaces every check tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Repeat the scenario with derived seeds and aggregate statistics.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads (default: logical processors).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn options(c: &Common) -> Options {
    Options { out: c.out.clone(), out_root: c.out_root.clone(), seed: c.seed, ..Default::default() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, opts) = match &cli.command {
        Command::Simulate { common } => (common, options(common)),
        Command::Estimate { common, estimator } => (common, Options { estimator: estimator.clone(), ..options(common) }),
        Command::Verify { common, tolerance } => (common, Options { tolerance: *tolerance, ..options(common) }),
        Command::Montecarlo { common, trials, jobs } => (common, Options { trials: *trials, jobs: *jobs, ..options(common) }),
    };
    let result = scenario::load(&common.scenario).and_then(|scn| match &cli.command {
        Command::Simulate { .. } => cmd_simulate(&scn, &opts),
        Command::Estimate { .. } => cmd_estimate(&scn, &opts),
        Command::Verify { .. } => cmd_verify(&scn, &opts),
        Command::Montecarlo { .. } => cmd_montecarlo(&scn, &opts),
    });
    match result {
        Ok(o) => {
            println!("{}", o.text);
            ExitCode::from(o.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
