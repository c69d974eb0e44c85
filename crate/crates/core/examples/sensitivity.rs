//! Input-output sensitivities at the initial operating point, checked against
//! central finite differences, then written as CSV.
//!
//! ```not_rust
//! cargo run --example sensitivity -- fixtures/four_bus_ring.json > sensitivity.csv
//! ```

use ofo_safety::grid::load_grid;
use ofo_safety::sensitivity::{compute_sensitivity, finite_difference_oracle, max_relative_deviation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/four_bus_ring.json").into());
    let grid = load_grid(&path)?;
    let u0 = grid.control_vector();
    let map = compute_sensitivity(&grid, &u0)?;
    for h in [1e-3, 5e-4, 2.5e-4] {
        let fd = finite_difference_oracle(&grid, &u0, h)?;
        eprintln!("step {h:.1e}: max relative deviation {:.2e}", max_relative_deviation(&fd.matrix, &map.matrix));
    }
    print!("{}", map.to_csv());
    Ok(())
}
