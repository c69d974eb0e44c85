//! Monte Carlo ensemble near a voltage limit, with and without measurement
//! noise, plus the density of critical states.
//!
//! ```not_rust
//! cargo run --release --example monte_carlo -- 200
//! ```

use ofo_safety::controller::{ControllerConfig, SetPoint};
use ofo_safety::grid::load_grid;
use ofo_safety::noise::UniformBounds;
use ofo_safety::region::{initial_state, sweep_for, SweepOptions};
use ofo_safety::sensitivity::compute_sensitivity;
use ofo_safety::stats::{two_proportion_z_test, wilson_interval};
use ofo_safety::uncertainty::{
    critical_fraction, density_histogram, run_monte_carlo, McOptions, NoiseConfig, StateFilter,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let grid = load_grid(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json"))?;
    let f = sweep_for(&grid, &SweepOptions::default())?;
    let (u0, _) = initial_state(&grid)?;
    let map = compute_sensitivity(&grid, &u0)?;
    let cfg = ControllerConfig::new(0.11294);
    let target = [SetPoint::new(0.453, -0.1586)];

    let mut rates = Vec::new();
    for meas in [0.0, 0.02] {
        let noise = NoiseConfig {
            sens_bounds: UniformBounds::symmetric(0.05),
            meas_bounds: UniformBounds::symmetric(meas),
            seed: 7,
            ..Default::default()
        };
        let res = run_monte_carlo(&grid, &u0, &map, &target, &cfg, &noise, n, &McOptions::default())?;
        let converged = res.set.trajectories.iter().filter(|t| t.converged()).count();
        let (lo, hi) = wilson_interval(converged, res.set.len(), 1.96);
        println!(
            "measurement noise ±{:.0}%: converged {converged}/{} [{lo:.3}, {hi:.3}], critical fraction {:.3}",
            meas * 100.0,
            res.set.len(),
            critical_fraction(&res.set, &f, 1e-3)
        );
        let h = density_histogram(&res.set, &f, 30, StateFilter::All, 1e-3);
        println!("  histogram: {} states, sum rho*a = {:.15}", h.n_total, h.mass());
        rates.push((converged, res.set.len()));
    }
    let (z, p) = two_proportion_z_test(rates[0].0, rates[0].1, rates[1].0, rates[1].1);
    println!("one-sided z = {z:.2}, p = {p:.2e}");
    Ok(())
}
