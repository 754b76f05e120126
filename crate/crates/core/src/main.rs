use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bivlmm::cli::{cmd_compare, cmd_fit, cmd_recover, cmd_simulate, exit_code_for_error, Overrides};
use bivlmm::estimation::Method;

#[derive(Parser)]
#[command(name = "bivlmm", version, about = "Bivariate linear mixed models for two-marker longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the estimation method of every model.
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ml,
    Reml,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the models of a run config to a CSV file.
    Fit { config: PathBuf },
    /// AIC table and likelihood-ratio tests from summary files written by `fit`.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Directory for comparison.txt and comparison.json.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulate replicates from a known truth, fit, and check bias.
    Recover { config: PathBuf },
    /// Write one simulated dataset (long CSV) and its truth sidecar.
    Simulate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let overrides = Overrides {
        seed: cli.seed,
        method: cli.method.map(|m| match m {
            MethodArg::Ml => Method::Ml,
            MethodArg::Reml => Method::Reml,
        }),
    };
    let result = match &cli.command {
        Command::Fit { config } => cmd_fit(config, overrides),
        Command::Compare { summaries, output } => cmd_compare(summaries, output.as_deref()),
        Command::Recover { config } => cmd_recover(config, overrides),
        Command::Simulate { config } => cmd_simulate(config, overrides),
    };
    match result {
        Ok((outcome, text)) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for_error(&e))
        }
    }
}
