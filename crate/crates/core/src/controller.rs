//! Online feedback optimization: projected-gradient steps on the PCC tracking
//! cost, with limits enforced through the measured state and a constant
//! sensitivity map.
//!
//! One iteration is one steady state: measure, form the gradient, solve the
//! step QP, actuate `u + α w`, wait for the grid to settle (solve the power
//! flow), repeat.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Segment, Trajectory};
use crate::grid::{apply_control, ControlVector, GridModel};
use crate::power_flow::{measure, solve_power_flow, MeasurementNoise, MeasurementVector, PowerFlowError, SystemState};
use crate::qp::{solve_qp, QpStatus, QuadraticProgram, Side};
use crate::sensitivity::SensitivityMap;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("power flow did not converge at iteration {k} (mismatch {mismatch:.3e})")]
    Diverged { k: usize, mismatch: f64 },
    #[error("empty set-point schedule")]
    EmptySchedule,
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

/// Requested PCC flow (p.u.).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetPoint {
    pub p: f64,
    pub q: f64,
}

impl SetPoint {
    pub fn new(p: f64, q: f64) -> Self {
        SetPoint { p, q }
    }

    pub fn distance(&self, (p, q): (f64, f64)) -> f64 {
        (p - self.p).hypot(q - self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub alpha: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
}

fn default_max_iterations() -> usize {
    500
}

fn default_convergence_tol() -> f64 {
    1e-3
}

impl ControllerConfig {
    pub fn new(alpha: f64) -> Self {
        ControllerConfig { alpha, max_iterations: default_max_iterations(), convergence_tol: default_convergence_tol() }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(ControlError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(ControlError::Config(format!(
                "convergence_tol must be positive, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Operational limits in measurement and control layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLimits {
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub s_max: Vec<Option<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl GridLimits {
    pub fn of(grid: &GridModel) -> Self {
        let (u_min, u_max) = grid.control_bounds();
        GridLimits {
            v_min: grid.buses.iter().map(|b| b.v_min).collect(),
            v_max: grid.buses.iter().map(|b| b.v_max).collect(),
            s_max: grid.branches.iter().map(|b| b.s_max).collect(),
            u_min,
            u_max,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.v_min.len() + self.s_max.len() + 2
    }

    /// Largest limit violation of a measured/true state (0 when feasible).
    pub fn violation(&self, state: &SystemState) -> f64 {
        let v = state.v.iter().enumerate().map(|(i, &v)| (self.v_min[i] - v).max(v - self.v_max[i]));
        let s = state.s_flows.iter().zip(&self.s_max).filter_map(|(&s, lim)| lim.map(|l| s - l));
        v.chain(s).fold(0.0, f64::max)
    }
}

/// Tracking cost `Φ = (p_pcc - p_set)² + (q_pcc - q_set)²`.
pub fn cost((p, q): (f64, f64), target: SetPoint) -> f64 {
    (p - target.p).powi(2) + (q - target.q).powi(2)
}

/// `∇Φ` with respect to the measurement vector; nonzero only at the PCC rows.
pub fn grad_cost(y: &MeasurementVector, target: SetPoint) -> DVector<f64> {
    let n = y.0.len();
    let (p, q) = y.pcc();
    let mut grad = DVector::zeros(n);
    grad[n - 2] = 2.0 * (p - target.p);
    grad[n - 1] = 2.0 * (q - target.q);
    grad
}

/// What a QP row constrains, for active-set reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Input(String),
    Voltage(String),
    Flow(String),
}

impl RowKind {
    pub fn tag(&self, side: Side) -> String {
        let side = match side {
            Side::Lower => "min",
            Side::Upper => "max",
        };
        match self {
            RowKind::Input(label) => {
                let (channel, unit) = label.split_once(':').unwrap_or(("u", label));
                format!("{channel}_{side}:{unit}")
            }
            RowKind::Voltage(bus) => format!("v_{side}:{bus}"),
            RowKind::Flow(branch) => format!("s_{side}:{branch}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepQp {
    pub qp: QuadraticProgram,
    pub rows: Vec<RowKind>,
}

/// The per-iteration QP: target `g = 2 ∇hᵀ ∇Φ` and the input, voltage and
/// flow rows, all scaled by the gain.
pub fn build_step_qp(
    u: &ControlVector,
    y: &MeasurementVector,
    grad_phi: &DVector<f64>,
    map: &SensitivityMap,
    limits: &GridLimits,
    alpha: f64,
) -> Result<StepQp, ControlError> {
    let n_in = u.len();
    let n_out = limits.n_outputs();
    if map.n_inputs() != n_in || limits.u_min.len() != n_in {
        return Err(ControlError::Dimension(format!("control vector {n_in}, map columns {}", map.n_inputs())));
    }
    if map.n_outputs() != n_out || y.0.len() != n_out || grad_phi.len() != n_out {
        return Err(ControlError::Dimension(format!(
            "measurements {}, map rows {}, expected {n_out}",
            y.0.len(),
            map.n_outputs()
        )));
    }
    // H(u)ᵀ ∇Φ with H(u)ᵀ = [I ∇hᵀ]; the cost has no direct u-dependence
    let target = 2.0 * map.matrix.transpose() * grad_phi;

    let n_buses = limits.v_min.len();
    let limited: Vec<usize> = (0..limits.s_max.len()).filter(|&b| limits.s_max[b].is_some()).collect();
    let n_rows = n_in + n_buses + limited.len();
    let mut a = DMatrix::zeros(n_rows, n_in);
    let mut lower = DVector::zeros(n_rows);
    let mut upper = DVector::zeros(n_rows);
    let mut rows = Vec::with_capacity(n_rows);

    for i in 0..n_in {
        a[(i, i)] = alpha;
        lower[i] = limits.u_min[i] - u.0[i];
        upper[i] = limits.u_max[i] - u.0[i];
        rows.push(RowKind::Input(map.col_labels.get(i).cloned().unwrap_or_else(|| format!("u{i}"))));
    }
    for b in 0..n_buses {
        let r = n_in + b;
        a.row_mut(r).copy_from(&(map.matrix.row(b) * alpha));
        lower[r] = limits.v_min[b] - y.0[b];
        upper[r] = limits.v_max[b] - y.0[b];
        rows.push(RowKind::Voltage(label_suffix(map.row_labels.get(b), b)));
    }
    for (k, &br) in limited.iter().enumerate() {
        let r = n_in + n_buses + k;
        let out = n_buses + br;
        a.row_mut(r).copy_from(&(map.matrix.row(out) * alpha));
        lower[r] = -y.0[out];
        upper[r] = limits.s_max[br].expect("limited branch") - y.0[out];
        rows.push(RowKind::Flow(label_suffix(map.row_labels.get(out), br)));
    }

    let qp = QuadraticProgram::new(target, a, lower, upper).map_err(|e| ControlError::Dimension(e.to_string()))?;
    Ok(StepQp { qp, rows })
}

fn label_suffix(label: Option<&String>, index: usize) -> String {
    label.and_then(|l| l.split_once(':').map(|(_, id)| id.to_string())).unwrap_or_else(|| index.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfoStep {
    pub k: usize,
    pub y: MeasurementVector,
    /// `Φ` evaluated on the measurement.
    pub phi: f64,
    pub grad_phi: DVector<f64>,
    pub w: DVector<f64>,
    pub u_next: ControlVector,
    pub qp_status: QpStatus,
    pub active_constraints: Vec<String>,
}

/// Computes the next set points from a settled state.
#[allow(clippy::too_many_arguments)]
pub fn step_from_state(
    k: usize,
    state: &SystemState,
    u: &ControlVector,
    map: &SensitivityMap,
    limits: &GridLimits,
    target: SetPoint,
    cfg: &ControllerConfig,
    noise: Option<&mut MeasurementNoise>,
) -> Result<OfoStep, ControlError> {
    let y = measure(state, noise).map_err(|_| ControlError::Diverged { k, mismatch: state.mismatch })?;
    let grad_phi = grad_cost(&y, target);
    let step = build_step_qp(u, &y, &grad_phi, map, limits, cfg.alpha)?;
    let sol = solve_qp(&step.qp);
    let active_constraints = sol.active_set.iter().map(|b| step.rows[b.row].tag(b.side)).collect();
    let u_next = match sol.status {
        QpStatus::Optimal => ControlVector(
            (0..u.len()).map(|i| (u.0[i] + cfg.alpha * sol.w[i]).clamp(limits.u_min[i], limits.u_max[i])).collect(),
        ),
        // hold the previous set point and let the caller see the flag
        QpStatus::Infeasible | QpStatus::MaxIter => u.clone(),
    };
    Ok(OfoStep {
        k,
        phi: cost(y.pcc(), target),
        y,
        grad_phi,
        w: sol.w,
        u_next,
        qp_status: sol.status,
        active_constraints,
    })
}

/// Actuates `u` on `grid` and returns the settled state.
pub fn settle(grid: &GridModel, u: &ControlVector, warm: Option<&SystemState>) -> Result<SystemState, ControlError> {
    let (applied, _) = apply_control(grid, u).map_err(PowerFlowError::from)?;
    Ok(solve_power_flow(&applied, warm)?)
}

/// One full loop iteration on the physical grid: settle at `u`, then step.
pub fn ofo_step(
    grid: &GridModel,
    u: &ControlVector,
    map: &SensitivityMap,
    target: SetPoint,
    cfg: &ControllerConfig,
    noise: Option<&mut MeasurementNoise>,
) -> Result<OfoStep, ControlError> {
    let state = settle(grid, u, None)?;
    if !state.converged {
        return Err(ControlError::Diverged { k: 0, mismatch: state.mismatch });
    }
    step_from_state(0, &state, u, map, &GridLimits::of(grid), target, cfg, noise)
}

/// Source of per-iteration disturbances. Iteration `k` is global over the schedule.
pub trait Disturbance: Sync {
    /// Physical grid in force while the state at iteration `k` settles.
    fn grid_at<'g>(&self, base: &'g GridModel, k: usize) -> Cow<'g, GridModel>;
    /// Noise applied to the measurement taken at iteration `k`.
    fn measurement_noise(&self, k: usize) -> Option<MeasurementNoise>;
}

/// Noise-free plant.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoDisturbance;

impl Disturbance for NoDisturbance {
    fn grid_at<'g>(&self, base: &'g GridModel, _k: usize) -> Cow<'g, GridModel> {
        Cow::Borrowed(base)
    }

    fn measurement_noise(&self, _k: usize) -> Option<MeasurementNoise> {
        None
    }
}

/// Tracks each set point in turn until the PCC flow is within
/// `convergence_tol` or `max_iterations` steps have been spent on it.
pub fn run_schedule(
    grid: &GridModel,
    u0: &ControlVector,
    map: &SensitivityMap,
    schedule: &[SetPoint],
    cfg: &ControllerConfig,
    disturbance: &dyn Disturbance,
) -> Result<Trajectory, ControlError> {
    if schedule.is_empty() {
        return Err(ControlError::EmptySchedule);
    }
    cfg.validate()?;
    let limits = GridLimits::of(grid);
    let mut u = u0.clone();
    let first = settle(&disturbance.grid_at(grid, 0), &u, None)?;
    if !first.converged {
        return Err(ControlError::Diverged { k: 0, mismatch: first.mismatch });
    }
    let mut traj = Trajectory::start(first, u.clone());

    for &target in schedule {
        let start = traj.states.len() - 1;
        let mut spent = 0;
        loop {
            let k = traj.states.len() - 1;
            let current = &traj.states[k];
            if target.distance(current.pcc()) <= cfg.convergence_tol {
                traj.segments.push(Segment { target, start, final_index: k, converged: true });
                break;
            }
            if spent == cfg.max_iterations {
                traj.segments.push(Segment { target, start, final_index: k, converged: false });
                break;
            }
            let mut noise = disturbance.measurement_noise(k);
            let step = step_from_state(k, current, &u, map, &limits, target, cfg, noise.as_mut())?;
            u = step.u_next.clone();
            let next = settle(&disturbance.grid_at(grid, k + 1), &u, Some(current))?;
            traj.steps.push(step);
            spent += 1;
            if !next.converged {
                let reason = ControlError::Diverged { k: k + 1, mismatch: next.mismatch }.to_string();
                traj.segments.push(Segment { target, start, final_index: k, converged: false });
                traj.states.push(next);
                traj.controls.push(u);
                traj.abort = Some(reason);
                return Ok(traj);
            }
            traj.states.push(next);
            traj.controls.push(u.clone());
        }
    }
    Ok(traj)
}

/// Share of the descent limit from [`calibrate_gain`] used as the working gain.
/// Gains near the limit still descend but overshoot linearized limits on the first steps.
pub const GAIN_SAFETY_FACTOR: f64 = 0.5;

/// Largest gain in `[lo, hi]` (found by bisection) for which the noise-free
/// tracking cost never increases along runs toward every probe set point.
pub fn calibrate_gain(
    grid: &GridModel,
    u0: &ControlVector,
    map: &SensitivityMap,
    probes: &[SetPoint],
    iterations: usize,
    (mut lo, mut hi): (f64, f64),
    bisections: usize,
) -> Result<f64, ControlError> {
    let passes = |alpha: f64| -> Result<bool, ControlError> {
        let cfg = ControllerConfig { alpha, max_iterations: iterations, convergence_tol: 1e-12 };
        for &probe in probes {
            let traj = run_schedule(grid, u0, map, &[probe], &cfg, &NoDisturbance)?;
            if traj.abort.is_some() {
                return Ok(false);
            }
            let phi: Vec<f64> = traj.states.iter().map(|s| cost(s.pcc(), probe)).collect();
            if phi.windows(2).any(|w| w[1] > w[0] + 1e-14) {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if passes(hi)? {
        return Ok(hi);
    }
    if !passes(lo)? {
        return Err(ControlError::Config(format!("no descent even at alpha = {lo}")));
    }
    for _ in 0..bisections {
        let mid = (lo * hi).sqrt();
        if passes(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_grid;
    use crate::sensitivity::compute_sensitivity;

    const TWO_BUS_UNIT: &str = r#"{
        "s_base_mva": 100,
        "buses": [
            {"id": "1", "type": "slack", "v_kv": 110},
            {"id": "2", "type": "pq", "v_kv": 110, "v_max_pu": 1.02}
        ],
        "branches": [{"id": "l12", "from": "1", "to": "2", "r_pu": 0.02, "x_pu": 0.1, "s_max_mva": 80}],
        "flex_units": [{"id": "g2", "bus": "2", "p_min_mw": -50, "p_max_mw": 50,
            "q_min_mvar": -100, "q_max_mvar": 100, "p_mw": 10, "q_mvar": 0}],
        "loads": [{"id": "d2", "bus": "2", "p_mw": 50, "q_mvar": 10, "class": "household"}],
        "pcc_branch": "l12"
    }"#;

    fn setup() -> (GridModel, ControlVector, SensitivityMap) {
        let g = parse_grid(TWO_BUS_UNIT).unwrap();
        let u0 = g.control_vector();
        let map = compute_sensitivity(&g, &u0).unwrap();
        (g, u0, map)
    }

    #[test]
    fn gradient_of_cost() {
        let y = MeasurementVector(vec![1.0, 1.0, 0.3, 0.7, -0.2]);
        assert_eq!(grad_cost(&y, SetPoint::new(0.7, -0.2)).amax(), 0.0);
        let g = grad_cost(&y, SetPoint::new(0.2, -0.2));
        assert!((g[3] - 1.0).abs() < 1e-15);
        assert_eq!(g[4], 0.0);
        assert_eq!(g.rows(0, 3).amax(), 0.0);
    }

    #[test]
    fn fixed_point_at_target() {
        let (g, u0, map) = setup();
        let here = SetPoint::new(map.state.p_pcc, map.state.q_pcc);
        let step = ofo_step(&g, &u0, &map, here, &ControllerConfig::new(0.1), None).unwrap();
        assert_eq!(step.qp_status, QpStatus::Optimal);
        assert!(step.w.amax() < 1e-15);
        assert_eq!(step.u_next, u0);
    }

    #[test]
    fn gain_scales_rows_but_not_target() {
        let (g, u0, map) = setup();
        let limits = GridLimits::of(&g);
        let state = settle(&g, &u0, None).unwrap();
        let y = measure(&state, None).unwrap();
        let target = SetPoint::new(0.1, 0.0);
        let grad = grad_cost(&y, target);
        let a = build_step_qp(&u0, &y, &grad, &map, &limits, 0.1).unwrap();
        let b = build_step_qp(&u0, &y, &grad, &map, &limits, 0.2).unwrap();
        assert_eq!(a.qp.target, b.qp.target);
        assert_eq!(a.qp.a * 2.0, b.qp.a);
        assert_eq!(a.qp.lower, b.qp.lower);
        // 2 inputs + 2 buses + 1 limited branch
        assert_eq!(a.rows.len(), 5);
    }

    #[test]
    fn binding_voltage_row_blocks_reactive_push() {
        // a large reactive export needs q injection at bus 2, which lifts v2 into its 1.02 cap
        let (g, u0, map) = setup();
        let cfg = ControllerConfig::new(0.1);
        let target = SetPoint::new(map.state.p_pcc, -0.6);
        let traj = run_schedule(&g, &u0, &map, &[target], &cfg, &NoDisturbance).unwrap();
        let last = traj.steps.last().unwrap();
        assert!(last.active_constraints.iter().any(|c| c == "v_max:2"), "{:?}", last.active_constraints);
        let final_state = traj.states.last().unwrap();
        assert!(final_state.v[1] <= 1.02 + 1e-6);
        assert!(!traj.converged());
    }

    #[test]
    fn interior_target_converges_with_descent() {
        let (g, u0, map) = setup();
        let cfg = ControllerConfig::new(0.05);
        let target = SetPoint::new(map.state.p_pcc - 0.2, map.state.q_pcc + 0.05);
        let traj = run_schedule(&g, &u0, &map, &[target], &cfg, &NoDisturbance).unwrap();
        assert!(traj.converged());
        let phi: Vec<f64> = traj.states.iter().map(|s| cost(s.pcc(), target)).collect();
        assert!(phi.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_at_current_flow_is_immediate() {
        let (g, u0, map) = setup();
        let here = SetPoint::new(map.state.p_pcc, map.state.q_pcc);
        let traj = run_schedule(&g, &u0, &map, &[here], &ControllerConfig::new(0.1), &NoDisturbance).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.segments[0].final_index, 0);
        assert!(traj.segments[0].converged);
        assert!(run_schedule(&g, &u0, &map, &[], &ControllerConfig::new(0.1), &NoDisturbance).is_err());
        assert!(run_schedule(&g, &u0, &map, &[here], &ControllerConfig::new(0.0), &NoDisturbance).is_err());
    }

    #[test]
    fn calibrated_gain_passes_descent() {
        let (g, u0, map) = setup();
        let probes = [
            SetPoint::new(map.state.p_pcc - 0.1, map.state.q_pcc),
            SetPoint::new(map.state.p_pcc, map.state.q_pcc + 0.1),
        ];
        let alpha = calibrate_gain(&g, &u0, &map, &probes, 40, (1e-3, 2.0), 20).unwrap();
        assert!(alpha > 1e-3 && alpha < 2.0, "{alpha}");
        // a single unit tracking through ∂pcc/∂u ≈ -1: deadbeat gain is near 1/4
        assert!(alpha > 0.15 && alpha < 0.6, "{alpha}");
    }
}
