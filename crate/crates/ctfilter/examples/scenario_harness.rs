//! Driving the experiment harness from code instead of the CLI.
//!
//! Builds a custom scenario — an Ornstein–Uhlenbeck state with a Gaussian
//! channel, tracked by the closed-form filter and a bootstrap filter —
//! runs it twice (once with an override trimming the trial count), and
//! walks through the pieces of the returned report. The same config could
//! be serialized to JSON and handed to `ctfilter run`.
//!
//! ```text
//! cargo run --release --example scenario_harness
//! ```

use std::collections::BTreeMap;

use ctfilter::error::Result;
use ctfilter::harness::{run_scenario, RunOptions};
use ctfilter::scenario::{
    FamilySpec, FilterConfig, FilterKind, GaussianObsSpec, GridConfig, InitialSpec, ModelSection,
    ObsSection, ScenarioConfig, ScenarioKind,
};

fn main() -> Result<()> {
    let config = ScenarioConfig {
        scenario: ScenarioKind::Custom,
        seed: 2024,
        n_trials: 20,
        grid: GridConfig {
            t0: 0.0,
            dt: 1e-3,
            horizon: 2.0,
        },
        output_dir: Some("out/scenario_harness".into()),
        model: ModelSection {
            params: BTreeMap::new(),
            drift: Some(FamilySpec {
                family: "linear".into(),
                params: [("a".into(), -1.0)].into(),
            }),
            noise_var: Some(1.0),
            initial: Some(InitialSpec {
                mean: 0.0,
                var: 1.0,
            }),
        },
        observations: ObsSection {
            gaussian: Some(GaussianObsSpec {
                family: "linear".into(),
                params: [("b".into(), 1.0)].into(),
                noise_var: 0.5,
            }),
            point_process: None,
        },
        filters: vec![
            FilterConfig::named(FilterKind::KalmanBucy),
            FilterConfig {
                particles: Some(500),
                ..FilterConfig::named(FilterKind::Bpf)
            },
        ],
        density_stride: 0,
    };

    // Serialize/deserialize round trip: this is exactly the file format
    // `ctfilter run` and `ctfilter validate` consume.
    let json = serde_json::to_string_pretty(&config).expect("config serializes");
    let reparsed = ScenarioConfig::from_json(&json)?;

    let report = run_scenario(&reparsed, &RunOptions::default())?;
    println!(
        "full run: {} trials, {} ok, {:.1} s, files in {}",
        report.summary.n_trials,
        report.summary.n_ok,
        report.total_seconds,
        report.out_dir.display()
    );
    for f in &report.summary.filters {
        println!(
            "  {:<12} mean rmse {:.4}",
            f.label,
            f.mean_rmse.expect("successful trials")
        );
    }

    // Per-trial detail is in the report too, aligned with the grid.
    let trial = &report.trials[0];
    let track = &trial.tracks[0];
    println!(
        "trial 0 ({} steps): final truth {:+.4}, final {} estimate {:+.4} ± {:.4}",
        trial.times.len(),
        trial.truth.last().expect("nonempty"),
        track.label,
        track.estimate.last().expect("nonempty"),
        track.spread.last().expect("nonempty"),
    );

    // Overrides mirror the CLI flags (--trials, --seed, --out, --workers).
    let short = run_scenario(
        &reparsed,
        &RunOptions {
            trials: Some(3),
            out_dir: Some("out/scenario_harness_short".into()),
            ..RunOptions::default()
        },
    )?;
    println!(
        "override run: {} trials into {}",
        short.summary.n_trials,
        short.out_dir.display()
    );
    Ok(())
}
