use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use threshold_cox::cli;

/// Threshold Cox regression under covariate measurement error: fitting,
/// simulation studies, asymptotic-bias limits and concordance reporting.
#[derive(Parser)]
#[command(name = "threshold-cox", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the estimators to a subjects CSV and write a report
    Fit {
        /// JSON configuration file
        #[arg(long)]
        config: PathBuf,
    },
    /// Run simulation scenarios and write summary/replicates/boxplot CSVs
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// output directory
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Compute limiting values and asymptotic bias over a (ρ, τ) grid
    BiasLimit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit one method and report Harrell's C-index
    Concordance {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Some(threads) = cli::thread_cap_from_env() {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let args = Args::parse();
    let result = match args.command {
        Command::Fit { config } => cli::cmd_fit(&config),
        Command::Simulate { config, out_dir } => cli::cmd_simulate(&config, &out_dir),
        Command::BiasLimit { config } => cli::cmd_bias_limit(&config),
        Command::Concordance { config } => cli::cmd_concordance(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
