//! The grid filter as a posterior-density oracle.
//!
//! Two studies on an Ornstein–Uhlenbeck model:
//!
//! 1. **No observations.** Evolving the grid density under the
//!    Fokker–Planck operator alone must relax to the analytic stationary
//!    law N(0, 1/2); the L1 gap is printed along the way.
//! 2. **With observations.** Conditioning the same grid on a Gaussian
//!    channel must reproduce the closed-form linear filter, which is what
//!    makes the grid trustworthy as a reference for particle methods.
//!
//! Density snapshots land in `out/density_oracle/`.
//!
//! ```text
//! cargo run --release --example density_oracle
//! ```

use nalgebra::{DMatrix, DVector};

use ctfilter::error::Result;
use ctfilter::exact::{kalman_bucy_step, GaussianBelief};
use ctfilter::model::{DriftFamily, GaussianObsModel, InitialLaw, JumpDiffusionModel};
use ctfilter::pde::{cfl_substeps, fokker_planck_step, kushner_step, GridDensity};
use ctfilter::sim::{attach_gaussian_obs, simulate_jump_diffusion, TimeGrid};

fn main() -> Result<()> {
    let out = std::path::Path::new("out/density_oracle");
    std::fs::create_dir_all(out)?;

    let model = JumpDiffusionModel::scalar(DriftFamily::Linear { a: -1.0 }, 1.0)?
        .with_initial(InitialLaw::Gaussian {
            mean: DVector::from_vec(vec![2.0]),
            cov: DMatrix::from_element(1, 1, 0.25),
        });

    // --- 1. Relaxation to the stationary law ---------------------------
    let mut dens = GridDensity::from_gaussian(-6.0, 6.0, 400, 2.0, 0.25)?;
    let stationary = GridDensity::from_gaussian(-6.0, 6.0, 400, 0.0, 0.5)?;
    let dt = 2e-4;
    println!("Fokker–Planck relaxation, start N(2, 0.25):");
    let mut t = 0.0;
    for stage in 0..=4 {
        if stage > 0 {
            let t_next = 2.0_f64.powi(stage - 1);
            while t < t_next - 1e-12 {
                fokker_planck_step(&mut dens, &model, t, dt)?;
                t += dt;
            }
        }
        println!(
            "  t = {t:>4.1}: mean {:+.4}, var {:.4}, L1 to N(0, 0.5) = {:.2e}",
            dens.mean(),
            dens.variance(),
            dens.l1_distance(&stationary)?
        );
        dens.write_csv(&out.join(format!("relax_t{t:.1}.csv")))?;
    }

    // --- 2. Conditioned on observations: matches the exact filter ------
    let obs = GaussianObsModel::scalar_linear(1.0, 1.0)?;
    let grid = TimeGrid::from_horizon(0.0, 1e-3, 5.0)?;
    let mut path = simulate_jump_diffusion(&model, grid, 29)?;
    attach_gaussian_obs(&mut path, &obs)?;

    let mut dens = GridDensity::from_gaussian(-6.0, 6.0, 400, 2.0, 0.25)?;
    let (a, b) = (DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0));
    let sigma_x = DMatrix::from_element(1, 1, 1.0);
    let mut exact = GaussianBelief::scalar(2.0, 0.25)?;
    let mut worst = (0.0_f64, 0.0_f64); // (mean gap, var gap)
    for k in 0..grid.n_steps {
        let t = grid.t(k);
        let dy = DVector::from_column_slice(&path.dy[k]);
        let substeps = cfl_substeps(&dens, &model, t, grid.dt)?;
        kushner_step(&mut dens, &model, &obs, &dy, t, grid.dt, substeps)?;
        exact = kalman_bucy_step(&a, &b, &sigma_x, obs.noise_inv(), &exact, &dy, grid.dt)?;
        worst.0 = worst.0.max((dens.mean() - exact.mean1()).abs());
        worst.1 = worst.1.max((dens.variance() - exact.var1()).abs());
    }
    dens.write_csv(&out.join("posterior_T.csv"))?;
    println!("conditioned on a Gaussian channel for {} s:", grid.t_end());
    println!(
        "  grid posterior at T: mean {:+.5}, var {:.5}",
        dens.mean(),
        dens.variance()
    );
    println!(
        "  exact posterior at T: mean {:+.5}, var {:.5}",
        exact.mean1(),
        exact.var1()
    );
    println!(
        "  worst gap along the run: mean {:.2e}, var {:.2e}",
        worst.0, worst.1
    );
    println!("snapshots written to {}", out.display());
    Ok(())
}
