//! Input–output sensitivity of the measurement vector to the control vector.
//!
//! The map is the implicit-function derivative of the power-flow solution:
//! with mismatch `F(x, u) = 0`, `dx/du = -J⁻¹ ∂F/∂u` and `dy/du = ∂y/∂x · dx/du`.
//! It is computed once at an operating point and held constant.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{apply_control, ControlVector, GridModel};
use crate::noise::UniformBounds;
use crate::power_flow::{
    jacobian, measure, measurement_labels, solve_power_flow, MeasurementVector, Network, PowerFlowError, SystemState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    /// `(|N| + |B| + 2) × 2j`, rows in measurement order, columns in control order.
    pub matrix: DMatrix<f64>,
    pub u0: ControlVector,
    pub state: SystemState,
    pub mismatch: Option<UniformBounds>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl SensitivityMap {
    pub fn n_outputs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.matrix.ncols()
    }

    /// Matrix as CSV with a header row of control labels and a label column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("output");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for c in 0..self.matrix.ncols() {
                out.push_str(&format!(",{}", self.matrix[(r, c)]));
            }
            out.push('\n');
        }
        out
    }
}

/// Output Jacobian `∂y/∂x` at a state, columns ordered `[theta_pq; v_pq]`.
pub(crate) fn output_jacobian(net: &Network, n_buses: usize, state: &SystemState) -> DMatrix<f64> {
    let m = net.pq.len();
    let n_branches = net.branches.len();
    let mut position = vec![None; n_buses];
    for (r, &i) in net.pq.iter().enumerate() {
        position[i] = Some(r);
    }
    let mut dy = DMatrix::zeros(n_buses + n_branches + 2, 2 * m);
    for (i, pos) in position.iter().enumerate() {
        if let Some(r) = pos {
            dy[(i, m + r)] = 1.0;
        }
    }

    // scatter d/d(theta_near, theta_far, v_near, v_far) into state columns
    let scatter = |dy: &mut DMatrix<f64>, row: usize, near: usize, far: usize, grad: [f64; 4]| {
        for (k, bus) in [near, far, near, far].into_iter().enumerate() {
            if let Some(r) = position[bus] {
                let col = if k < 2 { r } else { m + r };
                dy[(row, col)] += grad[k];
            }
        }
    };

    let (v, theta) = (&state.v, &state.theta);
    for (b, br) in net.branches.iter().enumerate() {
        let f = br.flow_from(v, theta);
        let t = br.flow_to(v, theta);
        let (sf, st) = (f.p.hypot(f.q), t.p.hypot(t.q));
        let (end, near, far, s) = if sf >= st { (f, br.from, br.to, sf) } else { (t, br.to, br.from, st) };
        if s == 0.0 {
            // |S| has no derivative at zero flow; the zero subgradient is used
            continue;
        }
        let grad: [f64; 4] = std::array::from_fn(|k| (end.p * end.dp[k] + end.q * end.dq[k]) / s);
        scatter(&mut dy, n_buses + b, near, far, grad);
    }

    let pcc = &net.branches[net.pcc];
    let f = pcc.flow_from(v, theta);
    let row = n_buses + n_branches;
    scatter(&mut dy, row, pcc.from, pcc.to, f.dp);
    scatter(&mut dy, row + 1, pcc.from, pcc.to, f.dq);
    dy
}

/// Sensitivity of the measurements to the controllable injections of an
/// already-actuated grid at a converged state.
pub(crate) fn sensitivity_at_state(grid: &GridModel, state: &SystemState) -> Result<DMatrix<f64>, PowerFlowError> {
    let net = Network::new(grid);
    let m = net.pq.len();
    let index = grid.bus_index();
    let units: Vec<_> = grid.controllable_units().collect();
    let j = units.len();

    // dF/du = -E, so dx/du = J⁻¹ E
    let mut rhs = DMatrix::zeros(2 * m, 2 * j);
    for (c, unit) in units.iter().enumerate() {
        if let Some(r) = net.pq.iter().position(|&b| b == index[unit.bus.as_str()]) {
            rhs[(r, c)] = 1.0;
            rhs[(m + r, j + c)] = 1.0;
        }
    }
    let jac = jacobian(&net, &state.v, &state.theta);
    let dx = if m == 0 {
        rhs
    } else {
        let lu = jac.clone().lu();
        match lu.solve(&rhs) {
            Some(x) if x.iter().all(|e| e.is_finite()) => x,
            _ => {
                return Err(PowerFlowError::SingularJacobian { condition: crate::power_flow::condition_estimate(&jac) })
            }
        }
    };
    Ok(output_jacobian(&net, grid.buses.len(), state) * dx)
}

/// Linearizes the steady-state map at `u0`.
pub fn compute_sensitivity(grid: &GridModel, u0: &ControlVector) -> Result<SensitivityMap, PowerFlowError> {
    let (applied, _) = apply_control(grid, u0)?;
    let state = solve_power_flow(&applied, None)?;
    if !state.converged {
        return Err(PowerFlowError::NotConverged { iterations: state.iterations, mismatch: state.mismatch });
    }
    let matrix = sensitivity_at_state(&applied, &state)?;
    Ok(SensitivityMap {
        matrix,
        u0: u0.clone(),
        state,
        mismatch: None,
        row_labels: measurement_labels(grid),
        col_labels: grid.control_labels(),
    })
}

/// Scales every entry by `1 + ω` with `ω` drawn i.i.d. from `bounds`.
pub fn perturb_sensitivity_with<R: Rng>(map: &SensitivityMap, bounds: UniformBounds, rng: &mut R) -> SensitivityMap {
    let mut out = map.clone();
    if !bounds.is_zero() {
        // column-major traversal fixes the draw order
        for e in out.matrix.iter_mut() {
            *e *= 1.0 + bounds.sample(rng);
        }
    }
    out.mismatch = Some(bounds);
    out
}

pub fn perturb_sensitivity(map: &SensitivityMap, bounds: UniformBounds, seed: u64) -> SensitivityMap {
    perturb_sensitivity_with(map, bounds, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `h(u)` without clipping `u` to the unit bounds, so difference stencils may
/// step past a bound.
fn unclipped_map(grid: &GridModel, u: &[f64]) -> Result<MeasurementVector, PowerFlowError> {
    let j = grid.n_controllable();
    let mut g = grid.clone();
    for (slot, unit) in g.flex_units.iter_mut().filter(|f| f.controllable).enumerate() {
        unit.p = u[slot];
        unit.q = u[j + slot];
    }
    let state = solve_power_flow(&g, None)?;
    if !state.converged {
        return Err(PowerFlowError::NotConverged { iterations: state.iterations, mismatch: state.mismatch });
    }
    Ok(measure(&state, None).expect("converged state"))
}

/// Central finite differences of the steady-state map, column by column.
pub fn finite_difference_oracle(
    grid: &GridModel,
    u0: &ControlVector,
    step: f64,
) -> Result<SensitivityMap, PowerFlowError> {
    let (applied, _) = apply_control(grid, u0)?;
    let state = solve_power_flow(&applied, None)?;
    let n_out = grid.buses.len() + grid.branches.len() + 2;
    let mut matrix = DMatrix::zeros(n_out, u0.len());
    for c in 0..u0.len() {
        let mut plus = u0.0.clone();
        let mut minus = u0.0.clone();
        plus[c] += step;
        minus[c] -= step;
        let yp = unclipped_map(grid, &plus)?;
        let ym = unclipped_map(grid, &minus)?;
        for r in 0..n_out {
            matrix[(r, c)] = (yp.0[r] - ym.0[r]) / (2.0 * step);
        }
    }
    Ok(SensitivityMap {
        matrix,
        u0: u0.clone(),
        state,
        mismatch: None,
        row_labels: measurement_labels(grid),
        col_labels: grid.control_labels(),
    })
}

/// Largest entry-wise deviation `|a - b| / max(|b|, floor)`, where the floor is
/// `1e-3` of the largest entry of `b`. Entries far below the matrix scale are
/// compared on an absolute footing.
pub fn max_relative_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let floor = (1e-3 * b.amax()).max(f64::MIN_POSITIVE);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(floor)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_grid;

    const TWO_BUS_UNIT: &str = r#"{
        "s_base_mva": 100,
        "buses": [
            {"id": "1", "type": "slack", "v_kv": 110},
            {"id": "2", "type": "pq", "v_kv": 110}
        ],
        "branches": [{"id": "l12", "from": "1", "to": "2", "r_pu": 0.02, "x_pu": 0.1}],
        "flex_units": [{"id": "g2", "bus": "2", "p_min_mw": -50, "p_max_mw": 50,
            "q_min_mvar": -20, "q_max_mvar": 20, "p_mw": 10, "q_mvar": 5}],
        "loads": [{"id": "d2", "bus": "2", "p_mw": 50, "q_mvar": 10, "class": "household"}],
        "pcc_branch": "l12"
    }"#;

    #[test]
    fn two_bus_pcc_sensitivity_near_minus_one() {
        let g = parse_grid(TWO_BUS_UNIT).unwrap();
        let u0 = g.control_vector();
        let map = compute_sensitivity(&g, &u0).unwrap();
        let fd = finite_difference_oracle(&g, &u0, 1e-5).unwrap();
        let dp = map.matrix[(map.n_outputs() - 2, 0)];
        // each extra unit of local injection also trims the line losses
        assert!(dp < -1.0 && dp > -1.1, "{dp}");
        assert!(max_relative_deviation(&map.matrix, &fd.matrix) < 1e-4);
        // slack voltage is a constant channel
        assert_eq!(map.matrix.row(0).amax(), 0.0);
        assert_eq!(fd.matrix.row(0).amax(), 0.0);
    }

    #[test]
    fn lossless_active_power_balance() {
        let g = parse_grid(&TWO_BUS_UNIT.replace(r#""r_pu": 0.02"#, r#""r_pu": 0.0"#)).unwrap();
        let map = compute_sensitivity(&g, &g.control_vector()).unwrap();
        assert!((map.matrix[(map.n_outputs() - 2, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_perturbation_bounds() {
        let g = parse_grid(TWO_BUS_UNIT).unwrap();
        let a = compute_sensitivity(&g, &g.control_vector()).unwrap();
        let b = compute_sensitivity(&g, &g.control_vector()).unwrap();
        assert_eq!(a.matrix, b.matrix);

        assert_eq!(perturb_sensitivity(&a, UniformBounds::ZERO, 4).matrix, a.matrix);
        let bounds = UniformBounds::symmetric(0.05);
        let p1 = perturb_sensitivity(&a, bounds, 4);
        let p2 = perturb_sensitivity(&a, bounds, 4);
        assert_eq!(p1, p2);
        assert_eq!(p1.mismatch, Some(bounds));
        for (e, ep) in a.matrix.iter().zip(p1.matrix.iter()) {
            let (lo, hi) = if *e >= 0.0 { (e * 0.95, e * 1.05) } else { (e * 1.05, e * 0.95) };
            assert!(lo - 1e-15 <= *ep && *ep <= hi + 1e-15);
        }
    }

    #[test]
    fn csv_has_labels() {
        let g = parse_grid(TWO_BUS_UNIT).unwrap();
        let csv = compute_sensitivity(&g, &g.control_vector()).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "output,p:g2,q:g2");
        assert!(lines.next().unwrap().starts_with("v:1,"));
        assert_eq!(csv.lines().count(), 1 + 2 + 1 + 2);
    }
}
