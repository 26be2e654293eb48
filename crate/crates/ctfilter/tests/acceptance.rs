//! End-to-end acceptance checks for the library's shipped guarantees.
//!
//! Runs with a custom harness so every criterion prints exactly one
//! PASS/FAIL line with its wall time and the measured quantity. A stated
//! time budget is part of the criterion where one exists. The process
//! exits nonzero if any criterion fails; all criteria always run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use ctfilter::exact::{
    hmm_filter_step, kalman_bucy_step, log_odds_step, pp_finite_state_step, DiscreteBelief,
    DiscreteHMMModel, GaussianBelief,
};
use ctfilter::gaussian::{adf_pp_step, ekbf_step, pp_ekbf_step, GaussianClosureSpec};
use ctfilter::harness::{run_scenario, RunOptions};
use ctfilter::model::{
    apply_generator_jd, DriftFamily, GaussianObsModel, InitialLaw, JumpDiffusionModel,
    MarkovChainModel, ObservableFn, PointProcessObsModel, RateFamily,
};
use ctfilter::particle::{
    bpf_propagate, bpf_reweight_gaussian, fbpf_step, resample, ParticleEnsemble, ResampleSpec,
};
use ctfilter::pde::{cfl_substeps, kushner_step, GridDensity};
use ctfilter::rng::{derive_seed, stream, StreamTag};
use ctfilter::scenario::ScenarioConfig;
use ctfilter::sim::{attach_gaussian_obs, attach_pp_obs, simulate_jump_diffusion,
    simulate_markov_chain, TimeGrid};

type Outcome = Result<String, String>;

fn main() {
    let criteria: &[(&str, Option<f64>, fn() -> Outcome)] = &[
        (
            "discrete filter equals brute-force path enumeration",
            Some(1.0),
            discrete_filter_matches_enumeration,
        ),
        (
            "posterior variance reaches its stationary closed form",
            Some(1.0),
            riccati_reaches_analytic_root,
        ),
        (
            "linear model collapses the approximate filters",
            Some(60.0),
            linear_model_collapses_approximations,
        ),
        (
            "particle cloud tracks the grid oracle on the double well",
            Some(300.0),
            particle_cloud_tracks_grid_oracle,
        ),
        (
            "two-state click filters coincide in log-odds",
            Some(10.0),
            click_filters_coincide,
        ),
        (
            "weights degenerate without resampling, stay flat for constant readout",
            None,
            weights_degenerate_without_resampling,
        ),
        (
            "variance paths ignore click realizations for exponential rates",
            None,
            variance_ignores_event_realizations,
        ),
        (
            "discrete-likelihood and log-increment reweighting agree",
            None,
            discrete_recipe_matches_increment_weights,
        ),
        (
            "pathwise derivative of E[φ] matches the generator",
            None,
            generator_matches_path_derivative,
        ),
        (
            "shipped scenarios replay byte-identical",
            None,
            shipped_scenarios_replay_byte_identical,
        ),
    ];

    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|panic| Err(panic_text(&panic)));
        let elapsed = start.elapsed().as_secs_f64();
        let over_budget = budget.map_or(false, |b| elapsed > b);
        let (verdict, detail) = match (&outcome, over_budget) {
            (Ok(detail), false) => ("PASS", detail.clone()),
            (Ok(detail), true) => (
                "FAIL",
                format!("over the {}s budget; {detail}", budget.expect("checked")),
            ),
            (Err(reason), _) => ("FAIL", reason.clone()),
        };
        if verdict == "FAIL" {
            failures += 1;
        }
        println!(
            "acceptance {:02}  {verdict}  {elapsed:7.2} s  {name} — {detail}",
            i + 1
        );
    }
    if failures > 0 {
        eprintln!("{failures} of 10 acceptance criteria failed");
        std::process::exit(101);
    }
}

fn panic_text(panic: &(dyn std::any::Any + Send)) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| (*s).to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panicked".into())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// --------------------------------------------------------------------------
// 1. The discrete filter is exact, not approximate.
// --------------------------------------------------------------------------

fn discrete_filter_matches_enumeration() -> Outcome {
    let model = DiscreteHMMModel::binary(0.9, 0.2).map_err(err)?;
    let p = model.transition();
    let e = model.emission();
    let mut worst = 0.0_f64;
    for seed in 0..25 {
        let (_, symbols) = model.simulate(8, seed);
        let mut belief = DiscreteBelief::new(model.initial().clone()).map_err(err)?;
        for n in 1..=symbols.len() {
            belief = hmm_filter_step(&model, &belief, symbols[n - 1]).map_err(err)?;
            // Joint over every state path x₀..x_n, marginalized onto x_n.
            let mut joint = [0.0_f64; 2];
            for assignment in 0..(1u32 << (n + 1)) {
                let state = |k: usize| ((assignment >> k) & 1) as usize;
                let mut prob = model.initial()[state(0)];
                for k in 0..n {
                    prob *= p[(state(k), state(k + 1))] * e[(state(k + 1), symbols[k])];
                }
                joint[state(n)] += prob;
            }
            let enumerated = joint[1] / (joint[0] + joint[1]);
            worst = worst.max((belief.prob(1) - enumerated).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!(
            "max |filter − enumeration| = {worst:.1e} over 25 eight-symbol streams"
        ))
    } else {
        Err(format!("max gap {worst:.1e} exceeds 1e-12"))
    }
}

// --------------------------------------------------------------------------
// 2. The closed-form variance settles on the analytic Riccati root.
// --------------------------------------------------------------------------

fn riccati_reaches_analytic_root() -> Outcome {
    let a = DMatrix::from_element(1, 1, -1.0);
    let b = DMatrix::from_element(1, 1, 1.0);
    let sigma_x = DMatrix::from_element(1, 1, 1.0);
    let noise_inv = DMatrix::from_element(1, 1, 1.0);
    let dy = DVector::zeros(1); // the variance never reads the data
    let dt = 1e-4;
    let mut belief = GaussianBelief::scalar(0.0, 1.0).map_err(err)?;
    for _ in 0..200_000 {
        belief =
            kalman_bucy_step(&a, &b, &sigma_x, &noise_inv, &belief, &dy, dt).map_err(err)?;
    }
    // With all coefficients ±1 the stationary equation −2Σ + 1 − Σ² = 0
    // has the positive root √2 − 1.
    let root = 2.0_f64.sqrt() - 1.0;
    let gap = (belief.var1() - root).abs();
    if gap <= 1e-6 {
        Ok(format!("|Σ_20 − (√2−1)| = {gap:.1e} at dt = 1e-4"))
    } else {
        Err(format!("variance gap {gap:.1e} exceeds 1e-6"))
    }
}

// --------------------------------------------------------------------------
// 3. Linear-Gaussian model: the approximations collapse onto the closed form.
// --------------------------------------------------------------------------

fn linear_model_collapses_approximations() -> Outcome {
    let model = JumpDiffusionModel::scalar(DriftFamily::Linear { a: -1.0 }, 1.0)
        .map_err(err)?
        .with_initial(InitialLaw::Gaussian {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 1.0),
        });
    let obs = GaussianObsModel::scalar_linear(1.0, 1.0).map_err(err)?;
    let a = DMatrix::from_element(1, 1, -1.0);
    let b = DMatrix::from_element(1, 1, 1.0);
    let sigma_x = DMatrix::from_element(1, 1, 1.0);

    // Pathwise: the linearized filter IS the exact filter here.
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 5.0).map_err(err)?;
    let mut sup = 0.0_f64;
    for seed in [11, 12, 13] {
        let mut path = simulate_jump_diffusion(&model, grid, seed).map_err(err)?;
        attach_gaussian_obs(&mut path, &obs).map_err(err)?;
        let mut exact = GaussianBelief::scalar(0.0, 1.0).map_err(err)?;
        let mut linearized = exact.clone();
        for k in 0..grid.n_steps {
            let dy = DVector::from_column_slice(&path.dy[k]);
            exact = kalman_bucy_step(&a, &b, &sigma_x, obs.noise_inv(), &exact, &dy, grid.dt)
                .map_err(err)?;
            linearized = ekbf_step(&linearized, &model, &obs, &dy, grid.t(k), grid.dt)
                .map_err(err)?
                .belief;
            sup = sup
                .max((exact.mean1() - linearized.mean1()).abs())
                .max((exact.var1() - linearized.var1()).abs());
        }
    }
    if sup > 1e-10 {
        return Err(format!("linearized filter deviates pathwise by {sup:.1e}"));
    }

    // Ensemble: the constant-gain particle flow is unbiased for the
    // closed-form mean; its terminal gap averages to zero over trials.
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 1.0).map_err(err)?;
    let master = 303;
    let n_trials = 100;
    let mut diffs = Vec::with_capacity(n_trials);
    for trial in 0..n_trials as u64 {
        let sim_seed = derive_seed(master, StreamTag::Signal, trial);
        let mut path = simulate_jump_diffusion(&model, grid, sim_seed).map_err(err)?;
        attach_gaussian_obs(&mut path, &obs).map_err(err)?;
        let mut exact = GaussianBelief::scalar(0.0, 1.0).map_err(err)?;
        let mut rng = stream(master, StreamTag::FilterNoise, trial);
        let mut ens =
            ParticleEnsemble::from_initial_law(model.initial(), 1000, &mut rng).map_err(err)?;
        for k in 0..grid.n_steps {
            let dy = DVector::from_column_slice(&path.dy[k]);
            exact = kalman_bucy_step(&a, &b, &sigma_x, obs.noise_inv(), &exact, &dy, grid.dt)
                .map_err(err)?;
            fbpf_step(&mut ens, &model, &obs, &dy, grid.t(k), grid.dt, &mut rng).map_err(err)?;
        }
        diffs.push(ens.weighted_mean()[0] - exact.mean1());
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    if mean.abs() <= 3.0 * se {
        Ok(format!(
            "pathwise sup {sup:.1e}; ensemble bias {mean:+.2e} within 3 s.e. = {:.1e} ({n_trials} trials, M = 1000)",
            3.0 * se
        ))
    } else {
        Err(format!(
            "ensemble mean off by {mean:+.2e}, more than 3 s.e. = {:.1e}",
            3.0 * se
        ))
    }
}

// --------------------------------------------------------------------------
// 4. Big particle cloud vs. the conditioned grid density on the double well.
// --------------------------------------------------------------------------

fn particle_cloud_tracks_grid_oracle() -> Outcome {
    let model = JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
        .map_err(err)?
        .with_initial(InitialLaw::Gaussian {
            mean: DVector::from_vec(vec![1.0]),
            cov: DMatrix::from_element(1, 1, 0.04),
        });
    let obs = GaussianObsModel::scalar_linear(1.0, 0.1_f64.sqrt()).map_err(err)?;
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 10.0).map_err(err)?;
    let seed = 404;
    let mut path = simulate_jump_diffusion(&model, grid, seed).map_err(err)?;
    attach_gaussian_obs(&mut path, &obs).map_err(err)?;

    let (xmin, xmax, cells) = (-3.0, 3.0, 400);
    let mut dens = GridDensity::from_gaussian(xmin, xmax, cells, 1.0, 0.04).map_err(err)?;
    let mut rng = stream(seed, StreamTag::FilterNoise, 0);
    let m = 100_000;
    let mut ens = ParticleEnsemble::from_initial_law(model.initial(), m, &mut rng).map_err(err)?;
    let spec = ResampleSpec::default();

    let mut l1_sum = 0.0;
    let mut l1_count = 0u32;
    for k in 0..grid.n_steps {
        let t = grid.t(k);
        let dy = DVector::from_column_slice(&path.dy[k]);
        let substeps = cfl_substeps(&dens, &model, t, grid.dt).map_err(err)?;
        kushner_step(&mut dens, &model, &obs, &dy, t, grid.dt, substeps).map_err(err)?;
        bpf_reweight_gaussian(&mut ens, &obs, &dy, t, grid.dt).map_err(err)?;
        if spec.should_trigger(ens.ess(), ens.len()) {
            resample(&mut ens, &spec, &mut rng).map_err(err)?;
        }
        bpf_propagate(&mut ens, &model, t, grid.dt, &mut rng).map_err(err)?;
        // Sampling the distance every 10th step keeps the histogram cost
        // off the critical path without changing the time average.
        if (k + 1) % 10 == 0 {
            let hist = ens.weighted_histogram(xmin, xmax, cells).map_err(err)?;
            let l1: f64 = hist
                .iter()
                .zip(dens.values())
                .map(|(h, p)| (h - p).abs() * dens.dx())
                .sum();
            l1_sum += l1;
            l1_count += 1;
        }
    }
    let avg = l1_sum / f64::from(l1_count);
    if avg <= 0.1 {
        Ok(format!(
            "time-averaged L1 = {avg:.4} over 10 s with M = 100k vs a {cells}-cell grid"
        ))
    } else {
        Err(format!("time-averaged L1 = {avg:.4} exceeds 0.1"))
    }
}

// --------------------------------------------------------------------------
// 5. The scalar log-odds recursion is the two-state filter, re-coordinated.
// --------------------------------------------------------------------------

fn click_filters_coincide() -> Outcome {
    let (a, r_plus, r_minus) = (0.5, 20.0, 4.0);
    let chain = MarkovChainModel::two_state_symmetric(a).map_err(err)?;
    let rates = DMatrix::from_row_slice(2, 2, &[r_plus, r_minus, r_minus, r_plus]);
    let obs = PointProcessObsModel::from_rate_table(rates.clone(), 1.0).map_err(err)?;
    let grid = TimeGrid::from_horizon(0.0, 1e-4, 10.0).map_err(err)?;

    let mut sup = 0.0_f64;
    for seed in [3, 4, 5] {
        let mut path = simulate_markov_chain(&chain, grid, seed).map_err(err)?;
        attach_pp_obs(&mut path, &obs).map_err(err)?;
        let mut belief = DiscreteBelief::new(chain.initial_dist().clone()).map_err(err)?;
        let mut alpha = belief.log_odds().map_err(err)?;
        for k in 0..grid.n_steps {
            belief =
                pp_finite_state_step(&chain, &rates, &belief, &path.dn[k], grid.dt).map_err(err)?;
            alpha = log_odds_step(
                alpha,
                a,
                r_plus,
                r_minus,
                [path.dn[k][0], path.dn[k][1]],
                grid.dt,
            );
            sup = sup.max((belief.log_odds().map_err(err)? - alpha).abs());
        }
    }
    if sup <= 1e-6 {
        Ok(format!(
            "sup |log-odds gap| = {sup:.1e} over 3 ten-second streams at dt = 1e-4"
        ))
    } else {
        Err(format!("log-odds gap {sup:.1e} exceeds 1e-6"))
    }
}

// --------------------------------------------------------------------------
// 6. ESS decays without resampling; constant readout never moves weights.
// --------------------------------------------------------------------------

fn weights_degenerate_without_resampling() -> Outcome {
    let model = JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
        .map_err(err)?
        .with_initial(InitialLaw::Gaussian {
            mean: DVector::from_vec(vec![1.0]),
            cov: DMatrix::from_element(1, 1, 0.04),
        });
    let obs = GaussianObsModel::scalar_linear(1.0, 0.1_f64.sqrt()).map_err(err)?;
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 5.0).map_err(err)?;
    let m = 500;

    let mut ess_t1 = Vec::new();
    let mut ess_t5 = Vec::new();
    for seed in 0..50 {
        let mut path = simulate_jump_diffusion(&model, grid, seed).map_err(err)?;
        attach_gaussian_obs(&mut path, &obs).map_err(err)?;
        let mut rng = stream(seed, StreamTag::FilterNoise, 0);
        let mut ens =
            ParticleEnsemble::from_initial_law(model.initial(), m, &mut rng).map_err(err)?;
        for k in 0..grid.n_steps {
            let dy = DVector::from_column_slice(&path.dy[k]);
            bpf_reweight_gaussian(&mut ens, &obs, &dy, grid.t(k), grid.dt).map_err(err)?;
            if k + 1 == 1000 {
                ess_t1.push(ens.ess());
            }
            bpf_propagate(&mut ens, &model, grid.t(k), grid.dt, &mut rng).map_err(err)?;
        }
        ess_t5.push(ens.ess());
    }
    let med1 = median(&mut ess_t1);
    let med5 = median(&mut ess_t5);
    if med5 >= med1 {
        return Err(format!(
            "median ESS did not decay: {med1:.1} at t = 1 vs {med5:.1} at t = 5"
        ));
    }

    // A readout that ignores the state gives every particle the same
    // increment, which cancels exactly — uniform weights forever.
    let flat = GaussianObsModel::scalar_linear(0.0, 1.0).map_err(err)?;
    let mut path = simulate_jump_diffusion(&model, grid, 99).map_err(err)?;
    attach_gaussian_obs(&mut path, &flat).map_err(err)?;
    let mut rng = stream(99, StreamTag::FilterNoise, 0);
    let mut ens = ParticleEnsemble::from_initial_law(model.initial(), m, &mut rng).map_err(err)?;
    for k in 0..1000 {
        let dy = DVector::from_column_slice(&path.dy[k]);
        bpf_reweight_gaussian(&mut ens, &flat, &dy, grid.t(k), grid.dt).map_err(err)?;
        if !ens.weights_uniform() {
            return Err(format!("weights left uniform at step {k} under a constant readout"));
        }
        bpf_propagate(&mut ens, &model, grid.t(k), grid.dt, &mut rng).map_err(err)?;
    }
    let ess_gap = (ens.ess() - m as f64).abs();
    if ess_gap > 1e-9 {
        return Err(format!("ESS {:.12} drifted from M = {m}", ens.ess()));
    }
    Ok(format!(
        "median ESS {med1:.1} (t = 1) → {med5:.1} (t = 5) across 50 seeds; flat readout kept all {m} weights bit-identical for 1000 steps"
    ))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite ESS"));
    values[values.len() / 2]
}

// --------------------------------------------------------------------------
// 7. Exponential rates: the posterior variance never reads the clicks.
// --------------------------------------------------------------------------
//
// This check asserts a stronger property than the moment equations
// actually have, and it is expected to FAIL; it is kept as an executable
// record of the gap. What does hold, and what the library's unit tests
// pin bitwise, is the per-step identity: for h = c·exp(βx) the
// dN-coefficient of the variance update cancels exactly (∂²log h = 0 for
// the linearized filter; spread − gain·gainᵀ = β²Σ² − (βΣ)² = 0 for the
// assumed-density filter), so from a shared belief a quiet step and a
// fired step produce the same variance. Whole paths still diverge across
// event realizations: every event moves the mean by βΣ, and the mean
// feeds back into the variance flow through the rate's curvature dt-term
// (∝ Σ² Σᵢ cᵢβᵢ² e^{βᵢμ}), whose μ-derivative vanishes for all beliefs
// only when every βᵢ = 0, i.e. when the channels carry no information.

fn variance_ignores_event_realizations() -> Outcome {
    let model = JumpDiffusionModel::scalar(DriftFamily::Linear { a: -1.0 }, 1.0)
        .map_err(err)?
        .with_initial(InitialLaw::Gaussian {
            mean: DVector::from_vec(vec![0.3]),
            cov: DMatrix::from_element(1, 1, 0.5),
        });
    let obs = PointProcessObsModel::from_families(
        vec![
            RateFamily::Exponential { c: 10.0, beta: 0.8 },
            RateFamily::Exponential { c: 5.0, beta: -1.1 },
        ],
        1.0,
    )
    .map_err(err)?;
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 2.0).map_err(err)?;

    // Three simulated click streams plus total silence: the mean paths
    // diverge, the variance paths must not.
    let mut realizations: Vec<Vec<Vec<u8>>> = Vec::new();
    for seed in [7, 8, 9] {
        let mut path = simulate_jump_diffusion(&model, grid, seed).map_err(err)?;
        attach_pp_obs(&mut path, &obs).map_err(err)?;
        realizations.push(path.dn);
    }
    realizations.push(vec![vec![0, 0]; grid.n_steps]);

    let closure = GaussianClosureSpec::AnalyticFamily;
    let mut linearized_paths: Vec<Vec<f64>> = Vec::new();
    let mut adf_paths: Vec<Vec<f64>> = Vec::new();
    for dn in &realizations {
        let mut lin = GaussianBelief::scalar(0.3, 0.5).map_err(err)?;
        let mut adf = lin.clone();
        let mut lin_vars = Vec::with_capacity(grid.n_steps);
        let mut adf_vars = Vec::with_capacity(grid.n_steps);
        for k in 0..grid.n_steps {
            let t = grid.t(k);
            lin = pp_ekbf_step(&lin, &model, &obs, &dn[k], t, grid.dt)
                .map_err(err)?
                .belief;
            adf = adf_pp_step(&adf, &model, &obs, &closure, &dn[k], t, grid.dt)
                .map_err(err)?
                .belief;
            lin_vars.push(lin.var1());
            adf_vars.push(adf.var1());
        }
        linearized_paths.push(lin_vars);
        adf_paths.push(adf_vars);
    }

    let sup_of = |paths: &[Vec<f64>]| -> f64 {
        let first = &paths[0];
        paths[1..]
            .iter()
            .flat_map(|p| p.iter().zip(first).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    };
    let sup_lin = sup_of(&linearized_paths);
    let sup_adf = sup_of(&adf_paths);
    if sup_lin <= 1e-12 && sup_adf <= 1e-12 {
        Ok(format!(
            "variance spread across 4 click realizations: linearized {sup_lin:.1e}, assumed-density {sup_adf:.1e}"
        ))
    } else {
        Err(format!(
            "variance depends on the events: linearized {sup_lin:.1e}, assumed-density {sup_adf:.1e} (tolerance 1e-12; the per-step event coefficient does cancel — see the note above this check)"
        ))
    }
}

// --------------------------------------------------------------------------
// 8. Per-step Gaussian likelihoods and log-increments give the same weights.
// --------------------------------------------------------------------------

fn discrete_recipe_matches_increment_weights() -> Outcome {
    let model = JumpDiffusionModel::scalar(DriftFamily::Linear { a: -1.0 }, 1.0)
        .map_err(err)?
        .with_initial(InitialLaw::Gaussian {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 1.0),
        });
    let sigma_y = 1.0;
    let obs = GaussianObsModel::scalar_linear(1.0, sigma_y).map_err(err)?;
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 0.5).map_err(err)?;
    let mut path = simulate_jump_diffusion(&model, grid, 77).map_err(err)?;
    attach_gaussian_obs(&mut path, &obs).map_err(err)?;

    let m = 200;
    let mut rng = stream(77, StreamTag::FilterNoise, 0);
    let mut ens = ParticleEnsemble::from_initial_law(model.initial(), m, &mut rng).map_err(err)?;
    let mut manual: Vec<f64> = vec![1.0 / m as f64; m];
    let mut worst = 0.0_f64;
    for k in 0..grid.n_steps {
        let t = grid.t(k);
        let dy = DVector::from_column_slice(&path.dy[k]);
        // Discrete recipe: weight by the Gaussian density of the increment
        // given each particle, N(dY; h·dt, σ²·dt), then normalize. The
        // x-independent factors cancel in the normalization, which is why
        // the log-increment form can drop them.
        let var = sigma_y * sigma_y * grid.dt;
        for (i, w) in manual.iter_mut().enumerate() {
            let h = ens.position(i)[0];
            let z = dy[0] - h * grid.dt;
            *w *= (-z * z / (2.0 * var)).exp();
        }
        let total: f64 = manual.iter().sum();
        for w in &mut manual {
            *w /= total;
        }

        bpf_reweight_gaussian(&mut ens, &obs, &dy, t, grid.dt).map_err(err)?;
        for (lib, mine) in ens.weights().iter().zip(&manual) {
            worst = worst.max((lib - mine).abs());
        }
        bpf_propagate(&mut ens, &model, t, grid.dt, &mut rng).map_err(err)?;
    }
    if worst <= 1e-12 {
        Ok(format!(
            "max normalized-weight gap {worst:.1e} over 500 steps, M = {m}, no resampling"
        ))
    } else {
        Err(format!("weight gap {worst:.1e} exceeds 1e-12"))
    }
}

// --------------------------------------------------------------------------
// 9. Generator duality: d/dt E[φ] at t = 0 equals the applied generator.
// --------------------------------------------------------------------------

fn generator_matches_path_derivative() -> Outcome {
    let h = 1e-3;
    let n_paths: u32 = 300_000;
    let grid = TimeGrid::new(0.0, h, 2).map_err(err)?;

    let ou = JumpDiffusionModel::scalar(DriftFamily::Linear { a: -1.0 }, 1.0).map_err(err)?;
    let well =
        JumpDiffusionModel::scalar(DriftFamily::DoubleWell { a: 4.0 }, 2.0_f64.sqrt())
            .map_err(err)?;
    // Rate-(2 + x²) jumps of size +1/2 on top of the same linear pull.
    let kicked = JumpDiffusionModel::scalar(DriftFamily::Linear { a: -1.0 }, 1.0)
        .map_err(err)?
        .with_jumps(
            1,
            Arc::new(|_x: &[f64], _t: f64, out: &mut [f64]| out[0] = 0.5),
            Arc::new(|x: &[f64], out: &mut [f64]| out[0] = 2.0 + x[0] * x[0]),
        );

    let square = ObservableFn::scalar(|x| x * x, |x| 2.0 * x, |_| 2.0);
    let sine = ObservableFn::scalar(f64::sin, f64::cos, |x| -x.sin());

    let pairs: [(&str, &JumpDiffusionModel, &ObservableFn, f64); 3] = [
        ("pull-to-zero, φ = x²", &ou, &square, 1.5),
        ("double well, φ = sin x", &well, &sine, 0.5),
        ("with jumps, φ = x²", &kicked, &square, 1.0),
    ];

    let mut report = Vec::new();
    for (pair_idx, (name, model, phi, x0)) in pairs.into_iter().enumerate() {
        let pinned = model
            .clone()
            .with_initial(InitialLaw::Dirac(DVector::from_vec(vec![x0])));
        let phi0 = phi.eval(&[x0]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n_paths {
            let seed = (pair_idx as u64) << 32 | u64::from(i);
            let path = simulate_jump_diffusion(&pinned, grid, seed).map_err(err)?;
            let slope = (phi.eval(&path.states[1]) - phi0) / h;
            sum += slope;
            sum_sq += slope * slope;
        }
        let n = f64::from(n_paths);
        let mc = sum / n;
        let se = ((sum_sq / n - mc * mc) / (n - 1.0)).sqrt();
        let applied =
            apply_generator_jd(model, phi, &DVector::from_vec(vec![x0]), 0.0).map_err(err)?;
        let z = (mc - applied) / se;
        if z.abs() > 3.0 {
            return Err(format!(
                "{name}: Monte-Carlo slope {mc:.4} vs generator {applied:.4} is {z:+.1} s.e. away"
            ));
        }
        report.push(format!("{name} z = {z:+.2}"));
    }
    Ok(format!(
        "{} ({n_paths} paths each, h = {h})",
        report.join("; ")
    ))
}

// --------------------------------------------------------------------------
// 10. Shipped scenarios reproduce byte-for-byte.
// --------------------------------------------------------------------------

fn shipped_scenarios_replay_byte_identical() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    // Trial-count overrides keep the heavy scenarios inside the check's
    // budget; trial seeds are absolute, so a prefix of trials exercises
    // the same streams as the full run.
    let plans: [(&str, Option<usize>); 5] = [
        ("hmm_binary.json", None),
        ("piet_clicks.json", Some(40)),
        ("linear_gaussian.json", Some(5)),
        ("double_well.json", Some(3)),
        ("ou_clicks.json", Some(3)),
    ];
    let mut files_compared = 0usize;
    for (file, trials) in plans {
        let config = ScenarioConfig::from_file(&configs.join(file)).map_err(err)?;
        let mut dirs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::TempDir::new().map_err(err)?;
            let opts = RunOptions {
                trials,
                out_dir: Some(dir.path().to_path_buf()),
                ..RunOptions::default()
            };
            let report = run_scenario(&config, &opts).map_err(err)?;
            if !report.summary.failed.is_empty() {
                return Err(format!("{file}: {} trials failed", report.summary.failed.len()));
            }
            dirs.push(dir);
        }
        let names = |dir: &tempfile::TempDir| -> Result<Vec<String>, String> {
            let mut v: Vec<String> = std::fs::read_dir(dir.path())
                .map_err(err)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<Result<_, _>>()
                .map_err(err)?;
            v.sort();
            Ok(v)
        };
        let (a, b) = (names(&dirs[0])?, names(&dirs[1])?);
        if a != b {
            return Err(format!("{file}: reruns produced different file sets"));
        }
        for name in &a {
            if name == "timings.json" {
                continue; // wall times are the one sanctioned difference
            }
            let bytes_a = std::fs::read(dirs[0].path().join(name)).map_err(err)?;
            let bytes_b = std::fs::read(dirs[1].path().join(name)).map_err(err)?;
            if bytes_a != bytes_b {
                return Err(format!("{file}: {name} differs between reruns"));
            }
            files_compared += 1;
        }
    }
    Ok(format!(
        "{files_compared} files byte-identical across reruns of 5 shipped configs (timings.json exempt)"
    ))
}
