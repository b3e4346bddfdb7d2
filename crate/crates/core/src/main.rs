use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covsteer::cli::{cmd_steer, cmd_validate, threads_from_env, EXIT_OK, EXIT_USAGE};

/// Greedy covariance steering for discrete-time stochastic nonlinear systems.
#[derive(Debug, Parser)]
#[command(name = "covsteer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the greedy policy and export beliefs, ellipses and sigma points.
    Steer {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `output.directory` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Relax the target covariance at stages where it cannot be reached.
        #[arg(long)]
        soften: bool,
    },
    /// Monte Carlo simulation of a stored policy on the nonlinear system.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_USAGE as u8
            } else {
                EXIT_OK as u8
            });
        }
    };
    let code = match cli.command {
        Command::Steer { config, out, soften } => cmd_steer(&config, out.as_deref(), soften),
        Command::Validate {
            config,
            policy,
            samples,
            seed,
            out,
        } => cmd_validate(&config, &policy, samples, seed, out.as_deref(), threads_from_env()),
    };
    ExitCode::from(code as u8)
}
