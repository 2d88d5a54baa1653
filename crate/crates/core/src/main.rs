use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use supac::experiment::{self, ExperimentConfig, DEFAULT_QUANTILES};

#[derive(Parser)]
#[command(name = "supac", version, about = "Minimize Catoni's PAC-Bayes objective over Gaussian families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config (or a previous manifest).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize the traces of repeated runs by median and quantiles.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_QUANTILES)]
        quantiles: Vec<f64>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SUPAC_LOG", "info")).init();
    let result = match Cli::parse().command {
        Command::Run {
            config,
            output_dir,
            seed,
        } => ExperimentConfig::load(&config).and_then(|mut cfg| {
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let dir = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let files = experiment::run_experiment(&cfg, &dir)?;
            println!("wrote {} files to {}", files.len() + 1, dir.display());
            Ok(())
        }),
        Command::Aggregate {
            input,
            quantiles,
            output,
        } => experiment::aggregate(&input, &quantiles, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
