//! One projection QP: the closest point to `-g` inside a box cut by a
//! half-plane, with its active set and KKT residuals.
//!
//! ```not_rust
//! cargo run --example qp_step
//! ```

use nalgebra::{DMatrix, DVector};
use ofo_safety::qp::{check_kkt, solve_qp, QuadraticProgram};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = DVector::from_vec(vec![-2.0, -1.5]);
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let lower = DVector::from_vec(vec![-1.0, -1.0, f64::NEG_INFINITY]);
    let upper = DVector::from_vec(vec![1.0, 1.0, 1.2]);
    let qp = QuadraticProgram::new(g, a, lower, upper)?;

    let sol = solve_qp(&qp);
    println!("status {:?} after {} iterations", sol.status, sol.iterations);
    println!("w = [{:.6}, {:.6}], objective {:.6}", sol.w[0], sol.w[1], qp.objective(&sol.w));
    for b in &sol.active_set {
        println!("active: row {} ({:?})", b.row, b.side);
    }
    let kkt = check_kkt(&qp, &sol.w);
    println!(
        "KKT: stationarity {:.1e}, primal {:.1e}, dual {:.1e}, complementarity {:.1e}",
        kkt.stationarity, kkt.primal, kkt.dual, kkt.complementarity
    );
    Ok(())
}
