//! Feasible operating region of the PCC flow in the PQ plane.
//!
//! Each boundary point is found by pushing the PCC flow as far as possible
//! along a fixed ray, with the full AC model in the loop: the grid is
//! re-solved and re-linearized after every projected step, and the ray is held
//! by an equality row on the linearized PCC flow.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{build_step_qp, GridLimits};
use crate::geometry::{self, Point};
use crate::grid::{apply_control, ControlVector, GridModel};
use crate::noise::{Channel, StreamKey};
use crate::power_flow::{measure, measurement_labels, solve_power_flow, PowerFlowError, SystemState};
use crate::qp::{solve_qp, QpStatus, QuadraticProgram};
use crate::sensitivity::{sensitivity_at_state, SensitivityMap};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("n_angles must be at least 4, got {0}")]
    TooFewAngles(usize),
    #[error("n_samples must be at least 1000, got {0}")]
    TooFewSamples(usize),
    #[error("only {ok} of {total} directions produced a boundary point; first failure: {first}")]
    TooFewVertices { ok: usize, total: usize, first: String },
    #[error("sweep polygon is self-intersecting")]
    NotSimple,
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("initial operating point does not converge")]
    InitialState,
}

/// Quadrant of a sweep direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionSigns {
    pub sign_p: i8,
    pub sign_q: i8,
}

impl DirectionSigns {
    pub fn of_angle(theta: f64) -> Self {
        let s = |x: f64| if x >= 0.0 { 1 } else { -1 };
        DirectionSigns { sign_p: s(theta.cos()), sign_q: s(theta.sin()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    #[serde(default = "default_angles")]
    pub n_angles: usize,
    /// PCC distance an unconstrained push covers per iteration (p.u.).
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_sweep_iterations")]
    pub max_iterations: usize,
    /// A direction is finished once the predicted PCC progress of a step is below this (p.u.).
    #[serde(default = "default_stationarity")]
    pub stationarity_tol: f64,
}

fn default_angles() -> usize {
    72
}
fn default_step() -> f64 {
    0.02
}
fn default_sweep_iterations() -> usize {
    2000
}
fn default_stationarity() -> f64 {
    1e-9
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_angles: default_angles(),
            step: default_step(),
            max_iterations: default_sweep_iterations(),
            stationarity_tol: default_stationarity(),
        }
    }
}

impl SweepOptions {
    pub fn with_angles(n_angles: usize) -> Self {
        SweepOptions { n_angles, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleFailure {
    pub theta: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForPolygon {
    /// Boundary points `(p_pcc, q_pcc)` in sweep order.
    pub vertices: Vec<Point>,
    /// Sweep angle of each vertex (radians), measured around `center`.
    pub angles: Vec<f64>,
    pub signs: Vec<DirectionSigns>,
    /// Constraint tags binding at each vertex.
    pub binding: Vec<Vec<String>>,
    /// Control vector realizing each vertex.
    pub controls: Vec<Vec<f64>>,
    /// Ray origin: the PCC flow at the grid's initial operating point.
    pub center: Point,
    pub failures: Vec<AngleFailure>,
}

impl ForPolygon {
    /// Polygon from bare vertices (angles taken around the vertex centroid).
    pub fn from_vertices(vertices: Vec<Point>) -> Self {
        let center = geometry::centroid(&vertices);
        let angles: Vec<f64> = vertices.iter().map(|v| (v.1 - center.1).atan2(v.0 - center.0)).collect();
        ForPolygon {
            signs: angles.iter().map(|&t| DirectionSigns::of_angle(t)).collect(),
            binding: vec![Vec::new(); vertices.len()],
            controls: vec![Vec::new(); vertices.len()],
            angles,
            vertices,
            center,
            failures: Vec::new(),
        }
    }

    pub fn area(&self) -> f64 {
        geometry::area(&self.vertices)
    }

    pub fn centroid(&self) -> Point {
        geometry::centroid(&self.vertices)
    }

    /// Largest vertex distance from the centroid.
    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        self.vertices.iter().map(|v| (v.0 - c.0).hypot(v.1 - c.1)).fold(0.0, f64::max)
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        contains(self, p, tol)
    }

    pub fn is_simple(&self) -> bool {
        geometry::is_simple(&self.vertices)
    }

    /// Axis-aligned bounding box `(p_min, p_max, q_min, q_max)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |(a, b, c, d), v| {
                (a.min(v.0), b.max(v.0), c.min(v.1), d.max(v.1))
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_deg,p_pcc,q_pcc,binding_constraints\n");
        for i in 0..self.vertices.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.angles[i].to_degrees(),
                self.vertices[i].0,
                self.vertices[i].1,
                self.binding[i].join(";")
            ));
        }
        out
    }
}

/// Point-in-polygon with an inclusive tolerance band around the boundary.
pub fn contains(polygon: &ForPolygon, p: Point, tol: f64) -> bool {
    geometry::contains_point(&polygon.vertices, p, tol)
}

struct BoundaryPoint {
    point: Point,
    binding: Vec<String>,
    u: Vec<f64>,
}

/// Settled state at the grid's own initial set points.
pub fn initial_state(grid: &GridModel) -> Result<(ControlVector, SystemState), RegionError> {
    let u0 = grid.control_vector();
    let (applied, _) = apply_control(grid, &u0).map_err(PowerFlowError::from)?;
    let state = solve_power_flow(&applied, None)?;
    if !state.converged {
        return Err(RegionError::InitialState);
    }
    Ok((u0, state))
}

/// Sweeps `n_angles` uniformly spaced rays over `[0°, 360°)` from the
/// initial PCC flow and collects the farthest feasible point on each.
pub fn sweep_for(grid: &GridModel, opts: &SweepOptions) -> Result<ForPolygon, RegionError> {
    if opts.n_angles < 4 {
        return Err(RegionError::TooFewAngles(opts.n_angles));
    }
    let (u0, base) = initial_state(grid)?;
    let center = base.pcc();
    let limits = GridLimits::of(grid);
    let row_labels = measurement_labels(grid);
    let col_labels = grid.control_labels();

    let results: Vec<(f64, Result<BoundaryPoint, String>)> = (0..opts.n_angles)
        .into_par_iter()
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / opts.n_angles as f64;
            let ctx = RayContext { grid, limits: &limits, row_labels: &row_labels, col_labels: &col_labels, opts };
            (theta, ctx.extreme_point(&u0, &base, center, theta))
        })
        .collect();

    let mut poly = ForPolygon {
        vertices: Vec::new(),
        angles: Vec::new(),
        signs: Vec::new(),
        binding: Vec::new(),
        controls: Vec::new(),
        center,
        failures: Vec::new(),
    };
    for (theta, r) in results {
        match r {
            Ok(b) => {
                poly.vertices.push(b.point);
                poly.angles.push(theta);
                poly.signs.push(DirectionSigns::of_angle(theta));
                poly.binding.push(b.binding);
                poly.controls.push(b.u);
            }
            Err(reason) => poly.failures.push(AngleFailure { theta, reason }),
        }
    }
    if poly.vertices.len() < 3 {
        return Err(RegionError::TooFewVertices {
            ok: poly.vertices.len(),
            total: opts.n_angles,
            first: poly.failures.first().map(|f| f.reason.clone()).unwrap_or_default(),
        });
    }
    if !poly.is_simple() {
        return Err(RegionError::NotSimple);
    }
    Ok(poly)
}

const RAY_PENALTY: f64 = 10.0;
const BINDING_BAND: f64 = 1e-6;

struct RayContext<'a> {
    grid: &'a GridModel,
    limits: &'a GridLimits,
    row_labels: &'a [String],
    col_labels: &'a [String],
    opts: &'a SweepOptions,
}

impl RayContext<'_> {
    /// Limits within `BINDING_BAND` of their bound at the final state.
    fn boundary_point(&self, state: SystemState, u: ControlVector) -> BoundaryPoint {
        let l = self.limits;
        let mut binding = Vec::new();
        for (i, label) in self.col_labels.iter().enumerate() {
            let (channel, unit) = label.split_once(':').unwrap_or(("u", label));
            if u.0[i] - l.u_min[i] <= BINDING_BAND {
                binding.push(format!("{channel}_min:{unit}"));
            }
            if l.u_max[i] - u.0[i] <= BINDING_BAND {
                binding.push(format!("{channel}_max:{unit}"));
            }
        }
        for (b, bus) in self.grid.buses.iter().enumerate() {
            if state.v[b] - l.v_min[b] <= BINDING_BAND {
                binding.push(format!("v_min:{}", bus.id));
            }
            if l.v_max[b] - state.v[b] <= BINDING_BAND {
                binding.push(format!("v_max:{}", bus.id));
            }
        }
        for (k, br) in self.grid.branches.iter().enumerate() {
            if l.s_max[k].is_some_and(|m| m - state.s_flows[k] <= BINDING_BAND) {
                binding.push(format!("s_max:{}", br.id));
            }
        }
        BoundaryPoint { point: state.pcc(), binding, u: u.0 }
    }

    fn extreme_point(
        &self,
        u0: &ControlVector,
        base: &SystemState,
        center: Point,
        theta: f64,
    ) -> Result<BoundaryPoint, String> {
        let d = (theta.cos(), theta.sin());
        let n = (-theta.sin(), theta.cos());
        let mut u = u0.clone();
        let mut state = base.clone();
        // push length multiplier: grows while the linear prediction holds and
        // shrinks when the AC model disagrees
        let mut scale = 1.0;

        for _ in 0..self.opts.max_iterations {
            let (applied, _) = apply_control(self.grid, &u).map_err(|e| e.to_string())?;
            let matrix = sensitivity_at_state(&applied, &state).map_err(|e| e.to_string())?;
            let n_out = matrix.nrows();
            let jp = matrix.rows(n_out - 2, 2).into_owned();
            let jd = jp.row(0) * d.0 + jp.row(1) * d.1;
            let jn = jp.row(0) * n.0 + jp.row(1) * n.1;
            let reach = (&jp * jd.transpose()).norm();
            if reach < 1e-12 {
                return Err("PCC flow has no sensitivity along the ray".into());
            }

            let y = measure(&state, None).map_err(|e| e.to_string())?;
            let map = SensitivityMap {
                matrix,
                u0: u.clone(),
                state: state.clone(),
                mismatch: None,
                row_labels: self.row_labels.to_vec(),
                col_labels: self.col_labels.to_vec(),
            };
            let mut step =
                build_step_qp(&u, &y, &DVector::zeros(n_out), &map, self.limits, 1.0).map_err(|e| e.to_string())?;
            let off_ray = n.0 * (center.0 - state.p_pcc) + n.1 * (center.1 - state.q_pcc);

            loop {
                step.qp.target = jd.transpose() * (-scale * self.opts.step / reach);
                let qp = with_row(&step.qp, jn.transpose(), off_ray);
                let sol = solve_qp(&qp);
                if sol.status != QpStatus::Optimal {
                    return Err(format!("direction QP {:?}", sol.status));
                }
                // merit: progress along the ray minus a penalty on leaving it
                let predicted = (&jd * &sol.w)[0];
                let drift = (&jn * &sol.w)[0] - off_ray;
                let predicted_merit = predicted - RAY_PENALTY * (drift.abs() - off_ray.abs());
                if sol.w.amax() < self.opts.stationarity_tol
                    || (scale >= 1.0 && predicted_merit.abs() < self.opts.stationarity_tol)
                {
                    return Ok(self.boundary_point(state, u));
                }

                let next_u = ControlVector(
                    (0..u.len())
                        .map(|i| (u.0[i] + sol.w[i]).clamp(self.limits.u_min[i], self.limits.u_max[i]))
                        .collect(),
                );
                let (applied, _) = apply_control(self.grid, &next_u).map_err(|e| e.to_string())?;
                let next = solve_power_flow(&applied, Some(&state)).map_err(|e| e.to_string())?;
                let next_off = n.0 * (center.0 - next.p_pcc) + n.1 * (center.1 - next.q_pcc);
                let actual = d.0 * (next.p_pcc - state.p_pcc) + d.1 * (next.q_pcc - state.q_pcc)
                    - RAY_PENALTY * (next_off.abs() - off_ray.abs());
                if !next.converged || (predicted_merit > 0.0 && actual < 0.25 * predicted_merit) {
                    scale *= 0.25;
                    if scale < 1e-8 {
                        // no step the AC model accepts: locally extreme up to solver precision
                        if off_ray.abs() < 1e-6 && self.limits.violation(&state) <= 1e-6 {
                            return Ok(self.boundary_point(state, u));
                        }
                        return Err("push length collapsed away from the ray".into());
                    }
                    continue;
                }
                if predicted_merit > 0.0 && actual > 0.75 * predicted_merit {
                    scale = (scale * 2.0).min(1e6);
                }
                u = next_u;
                state = next;
                break;
            }
        }
        Err(format!("no stationary point after {} iterations", self.opts.max_iterations))
    }
}

/// Appends the equality row `rowᵀ w = rhs`.
fn with_row(qp: &QuadraticProgram, row: DVector<f64>, rhs: f64) -> QuadraticProgram {
    let (m, n) = qp.a.shape();
    let mut a = DMatrix::zeros(m + 1, n);
    a.rows_mut(0, m).copy_from(&qp.a);
    a.row_mut(m).copy_from(&row.transpose());
    let mut lower = qp.lower.clone().insert_row(m, rhs);
    let mut upper = qp.upper.clone().insert_row(m, rhs);
    // an inconsistent tiny residue cannot flip the bounds
    lower[m] = lower[m].min(upper[m]);
    upper[m] = upper[m].max(lower[m]);
    QuadraticProgram { target: qp.target.clone(), a, lower, upper }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCloud {
    /// PCC flows of sampled inputs that satisfy every limit.
    pub feasible: Vec<Point>,
    pub hull: Vec<Point>,
    pub n_samples: usize,
    pub n_infeasible: usize,
    pub n_diverged: usize,
}

/// Uniform sampling of the input box; keeps the PCC flow of every sample
/// whose settled state meets all voltage and flow limits.
pub fn sample_oracle_for(grid: &GridModel, n_samples: usize, seed: u64) -> Result<OracleCloud, RegionError> {
    if n_samples < 1000 {
        return Err(RegionError::TooFewSamples(n_samples));
    }
    let limits = GridLimits::of(grid);
    let outcomes: Vec<Option<Option<Point>>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamKey::new(seed, 0, Channel::Sampling, i as u64).rng();
            let u = ControlVector(
                limits
                    .u_min
                    .iter()
                    .zip(&limits.u_max)
                    .map(|(&lo, &hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo })
                    .collect(),
            );
            let (applied, _) = apply_control(grid, &u).ok()?;
            let state = solve_power_flow(&applied, None).ok()?;
            if !state.converged {
                return None;
            }
            Some((limits.violation(&state) <= 0.0).then(|| state.pcc()))
        })
        .collect();

    let mut cloud = OracleCloud { feasible: Vec::new(), hull: Vec::new(), n_samples, n_infeasible: 0, n_diverged: 0 };
    for o in outcomes {
        match o {
            None => cloud.n_diverged += 1,
            Some(None) => cloud.n_infeasible += 1,
            Some(Some(p)) => cloud.feasible.push(p),
        }
    }
    cloud.hull = geometry::convex_hull(&cloud.feasible);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signs_follow_quadrant() {
        assert_eq!(DirectionSigns::of_angle(0.3), DirectionSigns { sign_p: 1, sign_q: 1 });
        assert_eq!(DirectionSigns::of_angle(2.0), DirectionSigns { sign_p: -1, sign_q: 1 });
        assert_eq!(DirectionSigns::of_angle(4.0), DirectionSigns { sign_p: -1, sign_q: -1 });
        assert_eq!(DirectionSigns::of_angle(5.0), DirectionSigns { sign_p: 1, sign_q: -1 });
    }

    #[test]
    fn polygon_containment() {
        let f = ForPolygon::from_vertices(vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]);
        assert!(f.contains(f.centroid(), 0.0));
        for &v in &f.vertices {
            assert!(f.contains(v, 1e-3));
        }
        let r = f.radius();
        assert!(!f.contains((2.0 * r, 0.0), 1e-3));
        assert_eq!(f.area(), 4.0);
    }

    #[test]
    fn equality_row_is_appended() {
        let qp = QuadraticProgram::unconstrained(DVector::from_vec(vec![1.0, 1.0]));
        let with = with_row(&qp, DVector::from_vec(vec![1.0, -1.0]), 0.5);
        let sol = solve_qp(&with);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.w[0] - sol.w[1] - 0.5).abs() < 1e-12);
    }
}
