//! Experiment driver: validates configs, runs dyadic sweeps, fits
//! convergence rates, and emits plot data.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! failures (including sweeps that completed with failed levels, whose
//! partial results stay on disk).

use clap::{Parser, Subcommand};
use lagflow::experiment::{emit_plotdata, fit_rates, load_config, run_sweep};
use lagflow::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lagflow", version, about = "Lagrangian continuity-equation sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
    /// Fit both rate models to a finished run and write rates.json.
    Fit {
        /// Run directory containing results.csv.
        rundir: PathBuf,
    },
    /// Write gnuplot-ready .dat files next to a finished run's results.
    Plotdata {
        /// Run directory containing results.csv.
        rundir: PathBuf,
    },
    /// Parse and validate a config without running anything.
    Validate {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
}

/// Applies LAGFLOW_WORKERS to the global worker pool before any parallel
/// work starts; unset means rayon's default (one worker per core).
fn configure_workers() -> Result<()> {
    match std::env::var("LAGFLOW_WORKERS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let workers: usize = raw.parse().map_err(|_| {
                Error::Config(format!("LAGFLOW_WORKERS must be a positive integer, got {raw:?}"))
            })?;
            if workers == 0 {
                return Err(Error::Config(
                    "LAGFLOW_WORKERS must be a positive integer".to_string(),
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Run { config } => {
            let (config, hash) = load_config(&config)?;
            let report = run_sweep(&config, &hash)?;
            println!(
                "wrote {} and {} ({} levels, {} failed)",
                report.results_path.display(),
                report.summary_path.display(),
                report.n_levels,
                report.n_failed
            );
            Ok(if report.n_failed > 0 { 3 } else { 0 })
        }
        Command::Fit { rundir } => {
            let fits = fit_rates(&rundir.join("results.csv"))?;
            let path = rundir.join("rates.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&fits).map_err(|e| Error::Format(e.to_string()))?,
            )?;
            for fit in &fits {
                println!(
                    "{}/{} t={}: power β={:.3} (rms {:.2e}), log_inverse q={:.3} (rms {:.2e}){}",
                    fit.scheme,
                    fit.metric,
                    fit.t,
                    fit.power.exponent,
                    fit.power.residual_rms,
                    fit.log_inverse.exponent,
                    fit.log_inverse.residual_rms,
                    if fit.low_confidence {
                        "  [low confidence: non-monotone]"
                    } else {
                        ""
                    }
                );
            }
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Plotdata { rundir } => {
            let files = emit_plotdata(&rundir)?;
            for file in &files {
                println!("wrote {}", file.display());
            }
            Ok(0)
        }
        Command::Validate { config } => {
            let (cfg, hash) = load_config(&config)?;
            println!(
                "config ok: {} scheme, {} dt × {} dx levels, hash {hash}",
                match cfg.scheme {
                    lagflow::experiment::SchemeSpec::Singular => "singular",
                    lagflow::experiment::SchemeSpec::Diffuse => "diffuse",
                },
                cfg.dt_exponents.len(),
                cfg.dx_exponents.len()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
