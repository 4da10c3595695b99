use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedtraffic::experiment::{
    cmd_run, cmd_score, cmd_synth, format_report, write_ranking, ExperimentConfig, OUTPUT_DIR_ENV,
};
use fedtraffic::sustainability::{format_ranking, Exponents};

/// Federated traffic-forecasting simulator with energy and sustainability accounting.
#[derive(Debug, Parser)]
#[command(name = "fedtraffic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and score every model in a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank models from a CSV of name,e_val,c_tr,ds_kb,e_test,c_inf rows.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha_prime: f64,
        #[arg(long, default_value_t = 0.5)]
        beta_prime: f64,
        /// Where ranking.txt and ranking.csv go.
        #[arg(long, env = OUTPUT_DIR_ENV, default_value = "results")]
        out_dir: PathBuf,
    },
    /// Write a synthetic client trace as CSV.
    Synth {
        /// ElBorn-like, LesCorts-like or PobleSec-like.
        #[arg(long)]
        profile: String,
        /// Defaults to the profile's real trace length.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), fedtraffic::experiment::ExperimentError> {
    match command {
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?;
            let report = cmd_run(&config)?;
            print!("{}", format_report(&report));
            log::info!("reports written to {}", config.output_dir.display());
        }
        Command::Score {
            input,
            alpha,
            beta,
            gamma,
            alpha_prime,
            beta_prime,
            out_dir,
        } => {
            let exponents = Exponents {
                alpha,
                beta,
                gamma,
                alpha_prime,
                beta_prime,
            };
            let ranked = cmd_score(&input, exponents)?;
            print!("{}", format_ranking(&ranked));
            write_ranking(&ranked, &out_dir)?;
        }
        Command::Synth { profile, n, seed, out } => {
            let dataset = cmd_synth(&profile, n, seed, &out)?;
            log::info!("wrote {} records to {}", dataset.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
