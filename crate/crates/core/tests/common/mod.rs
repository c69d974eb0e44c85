//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DVector;
use ofo_safety::qp::QuadraticProgram;

pub struct LatticeOptimum {
    pub point: DVector<f64>,
    pub objective: f64,
    pub spacing: f64,
}

/// Brute-force minimum of a 2-d QP over a `points × points` lattice on `[-half, half]²`.
pub fn qp_grid_search(qp: &QuadraticProgram, half: f64, points: usize) -> LatticeOptimum {
    assert_eq!(qp.dim(), 2);
    let spacing = 2.0 * half / (points - 1) as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..points {
        let x = -half + i as f64 * spacing;
        for j in 0..points {
            let y = -half + j as f64 * spacing;
            let feasible = (0..qp.a.nrows()).all(|r| {
                let v = qp.a[(r, 0)] * x + qp.a[(r, 1)] * y;
                v >= qp.lower[r] && v <= qp.upper[r]
            });
            if feasible {
                let f = (x + qp.target[0]).powi(2) + (y + qp.target[1]).powi(2);
                if f < best.0 {
                    best = (f, x, y);
                }
            }
        }
    }
    LatticeOptimum { point: DVector::from_vec(vec![best.1, best.2]), objective: best.0, spacing }
}

use num_complex::Complex64;
use ofo_safety::grid::{load_grid, GridModel};
use ofo_safety::power_flow::{solve_power_flow, SystemState};

pub const FIXTURES: [&str; 4] = ["two_bus.json", "four_bus_ring.json", "box_unit.json", "synthetic_30.json"];

pub fn fixture_path(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> GridModel {
    load_grid(fixture_path(name)).unwrap()
}

/// Largest complex power mismatch `|V·conj(I) - S_spec|` over non-slack buses,
/// with currents summed branch by branch from the pi model.
pub fn complex_residual(grid: &GridModel, state: &SystemState) -> f64 {
    let idx = |id: &str| grid.buses.iter().position(|b| b.id == id).unwrap();
    let v: Vec<Complex64> = state.v.iter().zip(&state.theta).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    let mut current = vec![Complex64::new(0.0, 0.0); v.len()];
    for br in &grid.branches {
        let (f, t) = (idx(&br.from), idx(&br.to));
        let y = Complex64::new(br.r, br.x).inv();
        let half = Complex64::new(0.0, br.b / 2.0);
        // ideal transformer of ratio tap at the from end
        let vf = v[f] / br.tap;
        let series = (vf - v[t]) * y;
        current[f] += (series + vf * half) / br.tap;
        current[t] += -series + v[t] * half;
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); v.len()];
    for u in &grid.flex_units {
        spec[idx(&u.bus)] += Complex64::new(u.p, u.q);
    }
    for l in &grid.fixed_loads {
        spec[idx(&l.bus)] -= Complex64::new(l.p, l.q);
    }
    (0..v.len())
        .filter(|&i| grid.buses[i].kind == ofo_safety::grid::BusType::Pq)
        .map(|i| (v[i] * current[i].conj() - spec[i]).norm())
        .fold(0.0, f64::max)
}

/// Central finite differences of `[v, s, p_pcc, q_pcc]` in the unit
/// injections, built from repeated power-flow solves.
pub fn central_differences(grid: &GridModel, h: f64) -> nalgebra::DMatrix<f64> {
    let units: Vec<usize> = (0..grid.flex_units.len()).filter(|&i| grid.flex_units[i].controllable).collect();
    let j = units.len();
    let outputs = |g: &GridModel| -> Vec<f64> {
        let s = solve_power_flow(g, None).unwrap();
        assert!(s.converged);
        let mut y = s.v.clone();
        y.extend(&s.s_flows);
        y.extend([s.p_pcc, s.q_pcc]);
        y
    };
    let base_len = outputs(grid).len();
    let mut m = nalgebra::DMatrix::zeros(base_len, 2 * j);
    for (c, &ui) in units.iter().enumerate() {
        for (col, reactive) in [(c, false), (j + c, true)] {
            let shifted = |d: f64| {
                let mut g = grid.clone();
                if reactive {
                    g.flex_units[ui].q += d;
                } else {
                    g.flex_units[ui].p += d;
                }
                outputs(&g)
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            for r in 0..base_len {
                m[(r, col)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
    }
    m
}

use ofo_safety::analysis::{SafetyClass, Trajectory, TrajectorySet};
use ofo_safety::grid::{apply_control, ControlVector};
use ofo_safety::region::ForPolygon;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random 2-d QP: a box plus up to three half-planes or slabs around a feasible anchor.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QuadraticProgram {
    let g = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
    // a feasible anchor keeps the polyhedron nonempty
    let anchor = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let n_rows = rng.random_range(1..=3);
    let mut rows = vec![1.0, 0.0, 0.0, 1.0];
    let mut lo = vec![-2.0, -2.0];
    let mut hi = vec![2.0, 2.0];
    for _ in 0..n_rows {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (a0, a1) = (angle.cos(), angle.sin());
        let at_anchor = a0 * anchor[0] + a1 * anchor[1];
        rows.extend([a0, a1]);
        lo.push(if rng.random_bool(0.3) { at_anchor - rng.random_range(0.0..0.5) } else { f64::NEG_INFINITY });
        hi.push(at_anchor + rng.random_range(0.0..0.5));
    }
    let m = lo.len();
    QuadraticProgram::new(
        g,
        nalgebra::DMatrix::from_row_slice(m, 2, &rows),
        DVector::from_vec(lo),
        DVector::from_vec(hi),
    )
    .unwrap()
}

/// Even-odd rule plus a distance band around the edges.
pub fn inside(poly: &[(f64, f64)], (x, y): (f64, f64), tol: f64) -> bool {
    let n = poly.len();
    let mut odd = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.1 > y) != (b.1 > y) && x < a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1) {
            odd = !odd;
        }
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let t = (((x - a.0) * dx + (y - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        if (x - a.0 - t * dx).hypot(y - a.1 - t * dy) <= tol {
            return true;
        }
    }
    odd
}

/// PCC flows of uniformly drawn inputs whose state meets every limit.
pub fn feasible_cloud(g: &GridModel, n: usize, seed: u64) -> Vec<(f64, f64)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = g.control_bounds();
    let mut out = Vec::new();
    for _ in 0..n {
        let u = ControlVector(lo.iter().zip(&hi).map(|(&a, &b)| rng.random_range(a..=b)).collect());
        let (applied, _) = apply_control(g, &u).unwrap();
        let s = solve_power_flow(&applied, None).unwrap();
        let ok = g.buses.iter().zip(&s.v).all(|(b, &v)| b.v_min <= v && v <= b.v_max)
            && g.branches.iter().zip(&s.s_flows).all(|(br, &f)| br.s_max.is_none_or(|m| f <= m));
        if s.converged && ok {
            out.push(s.pcc());
        }
    }
    out
}

/// Regular hexagon of circumradius 1 around the origin.
pub fn hexagon() -> ForPolygon {
    ForPolygon::from_vertices(
        (0..6).map(|i| (i as f64 * std::f64::consts::FRAC_PI_3).sin_cos()).map(|(s, c)| (c, s)).collect(),
    )
}

// points inside the inscribed circle are inside, beyond the circumcircle outside
fn inner(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (r, a) = (rng.random_range(0.0..0.8), rng.random_range(0.0..std::f64::consts::TAU));
    (r * a.cos(), r * a.sin())
}

fn outer(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (r, a) = (rng.random_range(1.1..3.0), rng.random_range(0.0..std::f64::consts::TAU));
    (r * a.cos(), r * a.sin())
}

/// Trajectory set against [`hexagon`] whose class is known by construction.
pub fn planted(rng: &mut ChaCha8Rng, class: SafetyClass) -> TrajectorySet {
    let n_traj = rng.random_range(1..6);
    let unlucky = rng.random_range(0..n_traj);
    let trajectories = (0..n_traj)
        .map(|i| {
            let len = rng.random_range(3..30);
            let mut pts: Vec<_> = (0..len).map(|_| inner(rng)).collect();
            let n_seg = rng.random_range(1..=3.min(len - 1));
            let mut finals: Vec<usize> = (1..=n_seg).map(|s| s * (len - 1) / n_seg).collect();
            finals.dedup();
            if i == unlucky {
                match class {
                    SafetyClass::Safe => {}
                    SafetyClass::ConditionallySafe => {
                        let k = (0..len).find(|k| !finals.contains(k)).unwrap();
                        pts[k] = outer(rng);
                    }
                    SafetyClass::Unsafe => {
                        let k = finals[rng.random_range(0..finals.len())];
                        pts[k] = outer(rng);
                    }
                }
            }
            Trajectory::from_points(&pts, &finals)
        })
        .collect();
    TrajectorySet::new(trajectories)
}
