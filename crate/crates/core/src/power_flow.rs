//! Polar Newton–Raphson AC power flow and the measurement vector built from it.
//!
//! Measurement layout (fixed): `[v_1..v_n, s_1..s_m, p_pcc, q_pcc]` with buses
//! and branches in grid-file order. `p_pcc`/`q_pcc` are the flows entering the
//! PCC branch at its `from` end, so positive values import from the
//! superimposed grid.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{apply_control, BusType, ControlVector, GridError, GridModel};
use crate::noise::UniformBounds;

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITERATIONS: usize = 30;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("power-flow Jacobian is singular (condition estimate {condition:.3e})")]
    SingularJacobian { condition: f64 },
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")]
    NotConverged { iterations: usize, mismatch: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Admittances of a branch's two-port pi model.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BranchAdmittance {
    pub from: usize,
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

/// Index-resolved view of a validated grid.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    pub ybus: DMatrix<Complex64>,
    pub branches: Vec<BranchAdmittance>,
    pub slack: usize,
    /// Non-slack buses, in bus order. Position in this list is the state index.
    pub pq: Vec<usize>,
    pub pcc: usize,
    pub v_set: f64,
}

impl Network {
    pub fn new(grid: &GridModel) -> Self {
        let index = grid.bus_index();
        let n = grid.buses.len();
        let mut ybus = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        let branches: Vec<BranchAdmittance> = grid
            .branches
            .iter()
            .map(|br| {
                let f = index[br.from.as_str()];
                let t = index[br.to.as_str()];
                let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
                let ysh = Complex64::new(0.0, br.b / 2.0);
                let tap = br.tap;
                let a = BranchAdmittance {
                    from: f,
                    to: t,
                    yff: (ys + ysh) / (tap * tap),
                    yft: -ys / tap,
                    ytf: -ys / tap,
                    ytt: ys + ysh,
                };
                ybus[(f, f)] += a.yff;
                ybus[(f, t)] += a.yft;
                ybus[(t, f)] += a.ytf;
                ybus[(t, t)] += a.ytt;
                a
            })
            .collect();
        let slack = grid.slack_index().expect("validated grid has a slack bus");
        let pq = (0..n).filter(|&i| grid.buses[i].kind == BusType::Pq).collect();
        Network {
            ybus,
            branches,
            slack,
            pq,
            pcc: grid.pcc_index().expect("validated grid has a pcc branch"),
            v_set: grid.buses[slack].v_set,
        }
    }

    /// Bus injections computed from voltages.
    pub fn injections(&self, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = v.len();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                let y = self.ybus[(i, k)];
                if y.re == 0.0 && y.im == 0.0 {
                    continue;
                }
                let (s, c) = (theta[i] - theta[k]).sin_cos();
                p[i] += v[i] * v[k] * (y.re * c + y.im * s);
                q[i] += v[i] * v[k] * (y.re * s - y.im * c);
            }
        }
        (p, q)
    }
}

/// Power flow entering a branch at one end, with partial derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EndFlow {
    pub p: f64,
    pub q: f64,
    /// d/d(theta_near, theta_far, v_near, v_far)
    pub dp: [f64; 4],
    pub dq: [f64; 4],
}

pub(crate) fn end_flow(v_near: f64, v_far: f64, angle: f64, y_self: Complex64, y_mut: Complex64) -> EndFlow {
    let (s, c) = angle.sin_cos();
    let (g, b) = (y_mut.re, y_mut.im);
    let re = g * c + b * s;
    let im = g * s - b * c;
    let p = v_near * v_near * y_self.re + v_near * v_far * re;
    let q = -v_near * v_near * y_self.im + v_near * v_far * im;
    let dp_dangle = v_near * v_far * (-g * s + b * c);
    let dq_dangle = v_near * v_far * re;
    EndFlow {
        p,
        q,
        dp: [dp_dangle, -dp_dangle, 2.0 * v_near * y_self.re + v_far * re, v_near * re],
        dq: [dq_dangle, -dq_dangle, -2.0 * v_near * y_self.im + v_far * im, v_near * im],
    }
}

impl BranchAdmittance {
    pub fn flow_from(&self, v: &[f64], theta: &[f64]) -> EndFlow {
        end_flow(v[self.from], v[self.to], theta[self.from] - theta[self.to], self.yff, self.yft)
    }

    pub fn flow_to(&self, v: &[f64], theta: &[f64]) -> EndFlow {
        end_flow(v[self.to], v[self.from], theta[self.to] - theta[self.from], self.ytt, self.ytf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// Apparent-power magnitude at the more loaded end of each branch.
    pub s_flows: Vec<f64>,
    pub p_pcc: f64,
    pub q_pcc: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute active/reactive mismatch at a non-slack bus.
    pub mismatch: f64,
}

impl SystemState {
    pub fn pcc(&self) -> (f64, f64) {
        (self.p_pcc, self.q_pcc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector(pub Vec<f64>);

impl MeasurementVector {
    pub fn pcc(&self) -> (f64, f64) {
        let n = self.0.len();
        (self.0[n - 2], self.0[n - 1])
    }
}

/// Row labels of the measurement vector (`v:<bus>`, `s:<branch>`, `p_pcc`, `q_pcc`).
pub fn measurement_labels(grid: &GridModel) -> Vec<String> {
    grid.buses
        .iter()
        .map(|b| format!("v:{}", b.id))
        .chain(grid.branches.iter().map(|b| format!("s:{}", b.id)))
        .chain(["p_pcc".to_string(), "q_pcc".to_string()])
        .collect()
}

fn mismatch_vector(net: &Network, v: &[f64], theta: &[f64], p_spec: &[f64], q_spec: &[f64]) -> DVector<f64> {
    let (p, q) = net.injections(v, theta);
    let m = net.pq.len();
    DVector::from_fn(2 * m, |r, _| {
        if r < m {
            let i = net.pq[r];
            p[i] - p_spec[i]
        } else {
            let i = net.pq[r - m];
            q[i] - q_spec[i]
        }
    })
}

/// Jacobian of `[P; Q]` at the non-slack buses with respect to `[theta; v]` at the non-slack buses.
pub(crate) fn jacobian(net: &Network, v: &[f64], theta: &[f64]) -> DMatrix<f64> {
    let (p, q) = net.injections(v, theta);
    let m = net.pq.len();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for (r, &i) in net.pq.iter().enumerate() {
        for (c, &k) in net.pq.iter().enumerate() {
            let y = net.ybus[(i, k)];
            let (g, b) = (y.re, y.im);
            if i == k {
                jac[(r, c)] = -q[i] - b * v[i] * v[i];
                jac[(r, m + c)] = p[i] / v[i] + g * v[i];
                jac[(m + r, c)] = p[i] - g * v[i] * v[i];
                jac[(m + r, m + c)] = q[i] / v[i] - b * v[i];
            } else {
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let (s, co) = (theta[i] - theta[k]).sin_cos();
                jac[(r, c)] = v[i] * v[k] * (g * s - b * co);
                jac[(r, m + c)] = v[i] * (g * co + b * s);
                jac[(m + r, c)] = -v[i] * v[k] * (g * co + b * s);
                jac[(m + r, m + c)] = v[i] * (g * s - b * co);
            }
        }
    }
    jac
}

pub(crate) fn condition_estimate(mat: &DMatrix<f64>) -> f64 {
    let sv = mat.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn solve_linear(mat: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, PowerFlowError> {
    match mat.clone().lu().solve(rhs) {
        Some(x) if x.iter().all(|e| e.is_finite()) => Ok(x),
        _ => Err(PowerFlowError::SingularJacobian { condition: condition_estimate(&mat) }),
    }
}

fn state_from_voltages(
    net: &Network,
    v: Vec<f64>,
    theta: Vec<f64>,
    converged: bool,
    iterations: usize,
    mismatch: f64,
) -> SystemState {
    let s_flows = net
        .branches
        .iter()
        .map(|br| {
            let f = br.flow_from(&v, &theta);
            let t = br.flow_to(&v, &theta);
            f.p.hypot(f.q).max(t.p.hypot(t.q))
        })
        .collect();
    let pcc = net.branches[net.pcc].flow_from(&v, &theta);
    SystemState { v, theta, s_flows, p_pcc: pcc.p, q_pcc: pcc.q, converged, iterations, mismatch }
}

/// Newton–Raphson solve with the default tolerance and iteration cap.
/// Largest active or reactive power mismatch at a non-slack bus, recomputed
/// from the voltages in `state`.
pub fn nodal_residual(grid: &GridModel, state: &SystemState) -> f64 {
    let net = Network::new(grid);
    let (p, q) = net.injections(&state.v, &state.theta);
    let (p_spec, q_spec) = grid.bus_injections();
    net.pq.iter().map(|&i| (p[i] - p_spec[i]).abs().max((q[i] - q_spec[i]).abs())).fold(0.0, f64::max)
}

pub fn solve_power_flow(grid: &GridModel, initial: Option<&SystemState>) -> Result<SystemState, PowerFlowError> {
    solve_power_flow_with(grid, initial, PF_TOLERANCE, PF_MAX_ITERATIONS)
}

/// Newton–Raphson in polar coordinates. Hitting the iteration cap is not an
/// error: the last iterate comes back with `converged == false`.
pub fn solve_power_flow_with(
    grid: &GridModel,
    initial: Option<&SystemState>,
    tolerance: f64,
    max_iterations: usize,
) -> Result<SystemState, PowerFlowError> {
    let net = Network::new(grid);
    let n = grid.buses.len();
    let (mut v, mut theta) = match initial {
        Some(s) if s.v.len() == n => (s.v.clone(), s.theta.clone()),
        _ => (vec![1.0; n], vec![0.0; n]),
    };
    v[net.slack] = net.v_set;
    theta[net.slack] = 0.0;
    let (p_spec, q_spec) = grid.bus_injections();
    let m = net.pq.len();

    let mut iterations = 0;
    loop {
        let f = mismatch_vector(&net, &v, &theta, &p_spec, &q_spec);
        let worst = f.amax();
        if !worst.is_finite() {
            return Ok(state_from_voltages(&net, v, theta, false, iterations, worst));
        }
        if worst < tolerance {
            return Ok(state_from_voltages(&net, v, theta, true, iterations, worst));
        }
        if iterations >= max_iterations {
            return Ok(state_from_voltages(&net, v, theta, false, iterations, worst));
        }
        let dx = solve_linear(jacobian(&net, &v, &theta), &(-f))?;
        for (r, &i) in net.pq.iter().enumerate() {
            theta[i] += dx[r];
            v[i] += dx[m + r];
        }
        iterations += 1;
    }
}

/// Multiplicative uniform noise on every measurement channel.
#[derive(Debug, Clone)]
pub struct MeasurementNoise {
    pub bounds: UniformBounds,
    rng: ChaCha8Rng,
}

impl MeasurementNoise {
    pub fn new(bounds: UniformBounds, seed: u64) -> Self {
        MeasurementNoise { bounds, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn from_rng(bounds: UniformBounds, rng: ChaCha8Rng) -> Self {
        MeasurementNoise { bounds, rng }
    }

    fn factor(&mut self) -> f64 {
        1.0 + self.bounds.sample(&mut self.rng)
    }
}

#[derive(Debug, Error)]
#[error("cannot measure a non-converged power-flow state")]
pub struct NotConvergedState;

/// Stacks the state into the measurement vector, optionally perturbing each
/// entry by an independent relative uniform draw.
pub fn measure(
    state: &SystemState,
    noise: Option<&mut MeasurementNoise>,
) -> Result<MeasurementVector, NotConvergedState> {
    if !state.converged {
        return Err(NotConvergedState);
    }
    let mut y: Vec<f64> = state.v.iter().chain(&state.s_flows).copied().chain([state.p_pcc, state.q_pcc]).collect();
    if let Some(noise) = noise {
        if !noise.bounds.is_zero() {
            for e in &mut y {
                *e *= noise.factor();
            }
        }
    }
    Ok(MeasurementVector(y))
}

/// The steady-state map `h(u)`: apply `u`, solve from flat start, measure without noise.
pub fn steady_state_map(grid: &GridModel, u: &ControlVector) -> Result<MeasurementVector, PowerFlowError> {
    let (applied, _) = apply_control(grid, u)?;
    let state = solve_power_flow(&applied, None)?;
    if !state.converged {
        return Err(PowerFlowError::NotConverged { iterations: state.iterations, mismatch: state.mismatch });
    }
    Ok(measure(&state, None).expect("converged state"))
}
