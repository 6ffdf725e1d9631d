use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hydot::{ExperimentConfig, HarnessError};

/// Hyperspectral diffuse optical tomography experiments.
#[derive(Parser)]
#[command(name = "hydot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Print the default configuration.
    Defaults,
    /// Check a config file without running it.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env(|k| std::env::var(k).ok())?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Defaults => print!("{}", ExperimentConfig::defaults_toml()),
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("{}: valid {} config", config.display(), cfg.experiment.kind.name());
        }
        Command::Run { config } => {
            let cfg = load(&config)?;
            if cfg.experiment.threads > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.experiment.threads)
                    .build_global()
                    .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
            }
            let report = hydot::run(&cfg)?;
            println!("{} finished; outputs in {}", report.kind.name(), report.output_dir.display());
            for f in &report.files {
                println!("  {f}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hydot: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
