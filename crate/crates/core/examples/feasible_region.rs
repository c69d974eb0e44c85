//! Sweeps the feasible operating region at the PCC and cross-checks it
//! against uniform sampling of the input box.
//!
//! ```not_rust
//! cargo run --release --example feasible_region -- fixtures/four_bus_ring.json > for.csv
//! ```

use std::time::Instant;

use ofo_safety::grid::load_grid;
use ofo_safety::region::{sample_oracle_for, sweep_for, SweepOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json").into());
    let grid = load_grid(&path)?;

    let t = Instant::now();
    let f = sweep_for(&grid, &SweepOptions::with_angles(72))?;
    eprintln!(
        "{} vertices in {:.2?}, area {:.5} p.u.^2, center ({:.4}, {:.4})",
        f.vertices.len(),
        t.elapsed(),
        f.area(),
        f.center.0,
        f.center.1
    );
    for fail in &f.failures {
        eprintln!("  {:.1} deg failed: {}", fail.theta.to_degrees(), fail.reason);
    }

    let cloud = sample_oracle_for(&grid, 20_000, 1)?;
    let inside = cloud.feasible.iter().filter(|&&p| f.contains(p, 1e-3)).count();
    eprintln!(
        "oracle: {} feasible of {}, {} inside the sweep polygon ({:.2}%)",
        cloud.feasible.len(),
        cloud.n_samples,
        inside,
        100.0 * inside as f64 / cloud.feasible.len().max(1) as f64
    );
    print!("{}", f.to_csv());
    Ok(())
}
