use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use racer_cli::config::ExperimentConfig;
use racer_cli::report::write_manifest;
use racer_cli::run::{run_evalgp, run_h2h, run_timetrial};
use racer_cli::CliError;

/// Autonomous-racing experiment runner: iterative GP time trials, the
/// head-to-head exploration protocol, and offline GP evaluation.
#[derive(Parser)]
#[command(name = "racer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iterative time-trial session with GP dynamics compensation.
    Timetrial {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Base RNG seed; identical seeds reproduce identical outputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Head-to-head protocol: passive training, exploration session,
    /// evaluation batch against the baseline GP.
    H2h {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a stored opponent GP against a logged race.
    Evalgp {
        /// Stored GP model (JSON: dataset, kernel, noise).
        #[arg(long)]
        model: PathBuf,
        /// Logged race with its track (JSON).
        #[arg(long)]
        data: PathBuf,
        /// Prediction horizon steps for the error curve.
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Timetrial { config, seed, out } => {
            let bytes =
                fs::read(&config).map_err(|e| CliError::Io(config.display().to_string(), e))?;
            let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
            fs::create_dir_all(&out).map_err(|e| CliError::Io(out.display().to_string(), e))?;
            write_manifest(&out, &bytes, seed)?;
            let report = run_timetrial(&cfg, seed, &out)?;
            println!(
                "timetrial: {} iterations, final measured lap {:.3} s",
                report.lap_times_measured.len(),
                report.lap_times_measured.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::H2h { config, seed, out } => {
            let bytes =
                fs::read(&config).map_err(|e| CliError::Io(config.display().to_string(), e))?;
            let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
            fs::create_dir_all(&out).map_err(|e| CliError::Io(out.display().to_string(), e))?;
            write_manifest(&out, &bytes, seed)?;
            let report = run_h2h(&cfg, seed, &out)?;
            println!(
                "h2h: overtake mean {:?} s (baseline {:?} s)",
                report.overtake_time_mean,
                report.baseline.as_ref().and_then(|b| b.overtake_time_mean)
            );
        }
        Command::Evalgp { model, data, steps, out } => {
            let mut bytes =
                fs::read(&model).map_err(|e| CliError::Io(model.display().to_string(), e))?;
            let data_bytes =
                fs::read(&data).map_err(|e| CliError::Io(data.display().to_string(), e))?;
            bytes.extend_from_slice(&data_bytes);
            fs::create_dir_all(&out).map_err(|e| CliError::Io(out.display().to_string(), e))?;
            write_manifest(&out, &bytes, 0)?;
            let report = run_evalgp(&model, &data, steps, &out)?;
            println!("evalgp: rmse {:?}", report.gp_rmse);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
