//! Dense strictly convex QP with identity Hessian:
//!
//! ```text
//!     minimize    ‖w + g‖²
//!     subject to  lower ≤ A w ≤ upper
//! ```
//!
//! Solved with a dual active-set method (Goldfarb–Idnani) specialised to
//! `H = I`: start from the unconstrained minimiser `-g`, add the most violated
//! constraint, and drop multipliers that would turn negative. The active set at
//! termination is exact, and an empty feasible set is detected directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("constraint matrix has {got} columns, expected {expected}")]
    Columns { expected: usize, got: usize },
    #[error("bound vectors must have one entry per constraint row")]
    Rows,
    #[error("row {0}: lower bound exceeds upper bound")]
    Bounds(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub target: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(
        target: DVector<f64>,
        a: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        if a.ncols() != target.len() {
            return Err(QpError::Columns { expected: target.len(), got: a.ncols() });
        }
        if lower.len() != a.nrows() || upper.len() != a.nrows() {
            return Err(QpError::Rows);
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(QpError::Bounds(i));
        }
        Ok(QuadraticProgram { target, a, lower, upper })
    }

    pub fn unconstrained(target: DVector<f64>) -> Self {
        let n = target.len();
        QuadraticProgram { target, a: DMatrix::zeros(0, n), lower: DVector::zeros(0), upper: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        (w + &self.target).norm_squared()
    }

    /// One-sided form `nᵀ w ≥ b`. Infinite bounds are dropped.
    fn one_sided(&self) -> Vec<OneSided> {
        let mut out = Vec::new();
        for i in 0..self.a.nrows() {
            let row = self.a.row(i).transpose();
            if self.lower[i].is_finite() {
                out.push(OneSided {
                    normal: row.clone(),
                    rhs: self.lower[i],
                    bound: ActiveBound { row: i, side: Side::Lower },
                });
            }
            if self.upper[i].is_finite() {
                out.push(OneSided {
                    normal: -row,
                    rhs: -self.upper[i],
                    bound: ActiveBound { row: i, side: Side::Upper },
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveBound {
    pub row: usize,
    pub side: Side,
}

struct OneSided {
    normal: DVector<f64>,
    rhs: f64,
    bound: ActiveBound,
}

impl OneSided {
    fn slack(&self, w: &DVector<f64>) -> f64 {
        self.normal.dot(w) - self.rhs
    }

    fn tolerance(&self) -> f64 {
        1e-11 * (1.0 + self.rhs.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PivotRule {
    /// Add the constraint with the largest normalised violation.
    #[default]
    MostViolated,
    /// Add the lowest-index violated constraint.
    SmallestIndex,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub pivot: PivotRule,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { pivot: PivotRule::MostViolated, max_iterations: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: DVector<f64>,
    pub kkt_residual: f64,
    pub active_set: Vec<ActiveBound>,
    pub status: QpStatus,
    pub iterations: usize,
}

pub fn solve_qp(qp: &QuadraticProgram) -> QpSolution {
    solve_qp_with(qp, &QpOptions::default())
}

pub fn solve_qp_with(qp: &QuadraticProgram, opts: &QpOptions) -> QpSolution {
    let cons = qp.one_sided();
    let mut x = -&qp.target;
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0;

    let finish = |x: DVector<f64>, active: &[usize], status: QpStatus, iterations: usize| {
        let kkt_residual = check_kkt(qp, &x).max();
        QpSolution {
            w: x,
            kkt_residual,
            active_set: active.iter().map(|&i| cons[i].bound).collect(),
            status,
            iterations,
        }
    };

    'outer: loop {
        let candidate = pick_violated(&cons, &x, &active, opts.pivot);
        let Some(p) = candidate else {
            return finish(x, &active, QpStatus::Optimal, iterations);
        };
        let np = &cons[p].normal;
        let mut lambda_p = 0.0;

        loop {
            iterations += 1;
            if iterations > opts.max_iterations {
                return finish(x, &active, QpStatus::MaxIter, iterations);
            }
            let (z, r) = step_directions(&cons, &active, np);

            // largest dual step keeping active multipliers nonnegative
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-14 {
                    let t = lambda[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let zn = z.dot(np);
            let t2 = if z.norm() <= 1e-12 * np.norm() || zn <= 0.0 { f64::INFINITY } else { -cons[p].slack(&x) / zn };

            if t1.is_infinite() && t2.is_infinite() {
                return finish(x, &active, QpStatus::Infeasible, iterations);
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x += &z * t;
            }
            for (lj, rj) in lambda.iter_mut().zip(r.iter()) {
                *lj -= t * rj;
            }
            lambda_p += t;

            if t2 <= t1 {
                active.push(p);
                lambda.push(lambda_p);
                continue 'outer;
            }
            let k = drop.expect("finite dual step has a blocking index");
            active.remove(k);
            lambda.remove(k);
        }
    }
}

fn pick_violated(cons: &[OneSided], x: &DVector<f64>, active: &[usize], rule: PivotRule) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cons.iter().enumerate() {
        if active.contains(&i) {
            continue;
        }
        let s = c.slack(x);
        if s >= -c.tolerance() {
            continue;
        }
        let norm = c.normal.norm();
        let score = if norm > 0.0 { -s / norm } else { f64::INFINITY };
        match rule {
            PivotRule::SmallestIndex => return Some(i),
            PivotRule::MostViolated => {
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((i, score));
                }
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Primal direction `z` (component of `np` orthogonal to the active normals)
/// and dual direction `r = (NᵀN)⁻¹ Nᵀ np`.
fn step_directions(cons: &[OneSided], active: &[usize], np: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (np.clone(), DVector::zeros(0));
    }
    let n = np.len();
    let cols: Vec<DVector<f64>> = active.iter().map(|&i| cons[i].normal.clone()).collect();
    let nmat = DMatrix::from_columns(&cols);
    if active.len() > n {
        // cannot happen with independent normals; fall back to least squares
        let svd = nmat.clone().svd(true, true);
        let r = svd.solve(np, 1e-12).expect("svd computed with u and v");
        let z = np - &nmat * &r;
        return (z, r);
    }
    let qr = nmat.qr();
    let q = qr.q();
    let rmat = qr.r();
    let qtn = q.transpose() * np;
    let z = np - &q * &qtn;
    let r = rmat.solve_upper_triangular(&qtn).unwrap_or_else(|| {
        let svd = DMatrix::from_columns(&cols).svd(true, true);
        svd.solve(np, 1e-12).expect("svd computed with u and v")
    });
    (z, r)
}

/// Optimality certificate for a candidate point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Residuals of the KKT conditions at `w`, with multipliers fitted by
/// nonnegative least squares over the constraints that are tight or violated.
pub fn check_kkt(qp: &QuadraticProgram, w: &DVector<f64>) -> KktReport {
    let cons = qp.one_sided();
    let grad = w + &qp.target;
    let mut primal: f64 = 0.0;
    let mut near = Vec::new();
    for c in &cons {
        let s = c.slack(w);
        primal = primal.max(-s);
        if s <= 1e-9 * (1.0 + c.rhs.abs()) {
            near.push(c);
        }
    }
    if near.is_empty() {
        return KktReport { stationarity: grad.amax(), primal, dual: 0.0, complementarity: 0.0 };
    }
    let cmat = DMatrix::from_columns(&near.iter().map(|c| c.normal.clone()).collect::<Vec<_>>());
    let lambda = nnls(&cmat, &grad);
    let stationarity = (&cmat * &lambda - &grad).amax();
    let dual = lambda.iter().fold(0.0_f64, |acc, &l| acc.max(-l));
    let complementarity = near.iter().zip(lambda.iter()).fold(0.0_f64, |acc, (c, &l)| acc.max((l * c.slack(w)).abs()));
    KktReport { stationarity, primal: primal.max(0.0), dual, complementarity }
}

/// Lawson–Hanson nonnegative least squares: `min ‖C λ - r‖` with `λ ≥ 0`.
pub fn nnls(c: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let m = c.ncols();
    let mut lambda = DVector::zeros(m);
    let mut passive = vec![false; m];
    let tol = 1e-13 * (1.0 + c.amax() * r.amax());

    for _ in 0..3 * m + 10 {
        let grad = c.transpose() * (r - c * &lambda);
        let next = (0..m).filter(|&j| !passive[j] && grad[j] > tol).max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(t) = next else { break };
        passive[t] = true;

        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let sub = DMatrix::from_columns(&idx.iter().map(|&j| c.column(j).into_owned()).collect::<Vec<_>>());
            let sol = sub.svd(true, true).solve(r, 1e-12).expect("svd computed with u and v");
            if sol.iter().all(|&s| s > 0.0) {
                for (k, &j) in idx.iter().enumerate() {
                    lambda[j] = sol[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if sol[k] <= 0.0 {
                    alpha = alpha.min(lambda[j] / (lambda[j] - sol[k]));
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                lambda[j] += alpha * (sol[k] - lambda[j]);
                if lambda[j] <= 1e-15 {
                    lambda[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    lambda
}
