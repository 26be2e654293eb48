//! Command-line front end for the experiment harness.
//!
//! ```text
//! ctfilter run <config.json> [--seed N] [--trials N] [--out DIR] [--workers N]
//! ctfilter list-scenarios
//! ctfilter validate <config.json>
//! ```
//!
//! Exit codes: 0 on success, 2 on configuration errors (unreadable or
//! invalid config, bad override), 3 on runtime errors (including runs
//! where at least one trial failed). `CTFILTER_OUT_DIR` and
//! `CTFILTER_WORKERS` override the output directory and worker count when
//! the corresponding flag is absent.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctfilter::error::{Error, Result};
use ctfilter::harness::{run_scenario, FilterSummary, RunOptions};
use ctfilter::scenario::{ScenarioConfig, ScenarioKind};

#[derive(Parser)]
#[command(name = "ctfilter", version, about = "Continuous-time filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of a scenario and write its output directory.
    Run {
        /// Scenario config (JSON).
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Trial-count override.
        #[arg(long)]
        trials: Option<usize>,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker thread count (default: one per core).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// List the built-in scenario presets.
    ListScenarios,
    /// Check that a scenario config parses and resolves, without running it.
    Validate {
        /// Scenario config (JSON).
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

/// Loads a config file, mapping read failures to configuration errors so a
/// bad path exits 2 rather than 3.
fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ScenarioConfig::from_json(&text)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            trials,
            out,
            workers,
        } => {
            let cfg = load_config(&config)?;
            let opts = RunOptions {
                seed,
                trials,
                out_dir: out,
                workers,
            }
            .apply_env()?;
            let report = run_scenario(&cfg, &opts)?;
            let s = &report.summary;
            println!(
                "scenario {}: {} trials, seed {}, dt {}, {} steps",
                s.scenario, s.n_trials, s.seed, s.grid.dt, s.grid.n_steps
            );
            for f in &s.filters {
                println!("  {}", filter_line(f));
            }
            println!(
                "wrote {} ({} ok, {} failed, {:.1} s)",
                report.out_dir.display(),
                s.n_ok,
                s.failed.len(),
                report.total_seconds
            );
            if s.failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &s.failed {
                    eprintln!("trial {} failed: {}", f.trial, f.error);
                }
                Ok(ExitCode::from(3))
            }
        }
        Command::ListScenarios => {
            for kind in ScenarioKind::all() {
                println!("{:<16} {}", kind.name(), kind.description());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let resolved = cfg.resolve()?;
            println!(
                "ok: scenario {}, {} trials, {} filters, {} steps",
                resolved.kind.name(),
                resolved.n_trials,
                resolved.filters.len(),
                resolved.grid.n_steps
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn filter_line(f: &FilterSummary) -> String {
    let mut line = format!("{:<16}", f.label);
    if let Some(v) = f.mean_rmse {
        line.push_str(&format!(" rmse {v:.4}"));
    }
    if let Some(v) = f.accuracy {
        line.push_str(&format!(" accuracy {v:.3}"));
    }
    if let Some(v) = f.decision_accuracy {
        line.push_str(&format!(" decision {v:.3}"));
    }
    if let Some(v) = f.mean_l1_to_oracle {
        line.push_str(&format!(" l1-to-oracle {v:.4}"));
    }
    if let Some(v) = f.min_ess {
        line.push_str(&format!(" min-ess {v:.1}"));
    }
    if let Some(v) = f.resample_total {
        line.push_str(&format!(" resamples {v}"));
    }
    if f.clamp_total > 0 {
        line.push_str(&format!(" clamps {}", f.clamp_total));
    }
    line
}
