//! Disturbance channels and Monte Carlo ensembles of controller runs.
//!
//! Three channels perturb a run: Gaussian load deviations redrawn every
//! iteration, relative uniform measurement noise redrawn every measurement,
//! and a relative uniform mismatch of the sensitivity map drawn once per
//! trial. Each draw comes from its own keyed stream, so a trial is a pure
//! function of `(master seed, trial index)`.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Provenance, Trajectory, TrajectorySet};
use crate::controller::{run_schedule, ControllerConfig, Disturbance, SetPoint};
use crate::geometry::Point;
use crate::grid::{ControlVector, GridModel, LoadClass};
use crate::noise::{Channel, StreamKey, UniformBounds};
use crate::power_flow::MeasurementNoise;
use crate::region::{contains, ForPolygon};
use crate::sensitivity::{perturb_sensitivity_with, SensitivityMap};
use crate::stats::wilson_interval;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("load sigma for {0} must be finite and non-negative")]
    Sigma(&'static str),
    #[error("load covariance must be {expected}x{expected} and positive semi-definite")]
    Covariance { expected: usize },
    #[error("no schedule to run")]
    NoSchedule,
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Standard deviations (p.u.) of the additive load deviation per class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSigma {
    #[serde(default)]
    pub household: f64,
    #[serde(default)]
    pub industry: f64,
    #[serde(default)]
    pub commercial: f64,
}

impl LoadSigma {
    pub fn of(&self, class: LoadClass) -> f64 {
        match class {
            LoadClass::Household => self.household,
            LoadClass::Industry => self.industry,
            LoadClass::Commercial => self.commercial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub load_sigma: LoadSigma,
    /// Full covariance over `[p_1..p_L, q_1..q_L]` of the fixed loads; overrides `load_sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_covariance: Option<Vec<Vec<f64>>>,
    #[serde(default = "zero_bounds")]
    pub meas_bounds: UniformBounds,
    #[serde(default = "zero_bounds")]
    pub sens_bounds: UniformBounds,
    #[serde(default)]
    pub seed: u64,
}

fn zero_bounds() -> UniformBounds {
    UniformBounds::ZERO
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            load_sigma: LoadSigma::default(),
            load_covariance: None,
            meas_bounds: UniformBounds::ZERO,
            sens_bounds: UniformBounds::ZERO,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self, grid: &GridModel) -> Result<(), NoiseError> {
        let s = &self.load_sigma;
        for (name, v) in [("household", s.household), ("industry", s.industry), ("commercial", s.commercial)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NoiseError::Sigma(name));
            }
        }
        if let Some(cov) = &self.load_covariance {
            self.load_factor(grid, cov)?;
        }
        Ok(())
    }

    fn load_factor(&self, grid: &GridModel, cov: &[Vec<f64>]) -> Result<DMatrix<f64>, NoiseError> {
        let n = 2 * grid.fixed_loads.len();
        let bad = NoiseError::Covariance { expected: n };
        if cov.len() != n || cov.iter().any(|r| r.len() != n) {
            return Err(bad);
        }
        let m = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
        if (&m - m.transpose()).amax() > 1e-12 {
            return Err(bad);
        }
        // semi-definite matrices are accepted through a tiny diagonal lift
        let lifted = &m + DMatrix::identity(n, n) * 1e-14 * (1.0 + m.amax());
        lifted.cholesky().map(|c| c.l()).ok_or(bad)
    }

    pub fn has_load_noise(&self) -> bool {
        self.load_covariance.is_some()
            || self.load_sigma.household > 0.0
            || self.load_sigma.industry > 0.0
            || self.load_sigma.commercial > 0.0
    }

    pub fn is_zero(&self) -> bool {
        !self.has_load_noise() && self.meas_bounds.is_zero() && self.sens_bounds.is_zero()
    }
}

/// Adds one Gaussian deviation to every fixed load's `p` and `q`.
pub fn sample_load_noise<R: Rng>(grid: &GridModel, cfg: &NoiseConfig, rng: &mut R) -> GridModel {
    let mut out = grid.clone();
    match &cfg.load_covariance {
        Some(cov) => {
            let l = cfg.load_factor(grid, cov).expect("covariance validated");
            let z = DVector::from_fn(l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let dev = l * z;
            let n = out.fixed_loads.len();
            for (i, load) in out.fixed_loads.iter_mut().enumerate() {
                load.p += dev[i];
                load.q += dev[n + i];
            }
        }
        None => {
            for load in &mut out.fixed_loads {
                let sigma = cfg.load_sigma.of(load.class);
                // zero-sigma classes still consume draws so channels stay aligned
                let (zp, zq): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                load.p += sigma * zp;
                load.q += sigma * zq;
            }
        }
    }
    out
}

/// Disturbances of one Monte Carlo trial.
pub struct TrialDisturbance<'a> {
    pub cfg: &'a NoiseConfig,
    pub trial: u64,
}

impl TrialDisturbance<'_> {
    fn key(&self, channel: Channel, k: usize) -> StreamKey {
        StreamKey::new(self.cfg.seed, self.trial, channel, k as u64)
    }
}

impl Disturbance for TrialDisturbance<'_> {
    fn grid_at<'g>(&self, base: &'g GridModel, k: usize) -> Cow<'g, GridModel> {
        if !self.cfg.has_load_noise() {
            return Cow::Borrowed(base);
        }
        Cow::Owned(sample_load_noise(base, self.cfg, &mut self.key(Channel::Load, k).rng()))
    }

    fn measurement_noise(&self, k: usize) -> Option<MeasurementNoise> {
        if self.cfg.meas_bounds.is_zero() {
            return None;
        }
        Some(MeasurementNoise::from_rng(self.cfg.meas_bounds, self.key(Channel::Measurement, k).rng()))
    }
}

/// The map a trial's controller uses: the nominal one with a per-trial mismatch.
pub fn trial_map(map: &SensitivityMap, cfg: &NoiseConfig, trial: u64) -> SensitivityMap {
    if cfg.sens_bounds.is_zero() {
        return map.clone();
    }
    let mut rng = StreamKey::new(cfg.seed, trial, Channel::Sensitivity, 0).rng();
    perturb_sensitivity_with(map, cfg.sens_bounds, &mut rng)
}

#[derive(Debug, Clone, Default)]
pub struct McOptions {
    /// Worker threads; `None` uses the global pool, `Some(1)` runs serially.
    pub jobs: Option<usize>,
    /// Trials forced to fail, for exercising the failure manifest.
    pub inject_failures: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub set: TrajectorySet,
    pub failures: Vec<TrialFailure>,
}

pub fn run_trial(
    grid: &GridModel,
    u0: &ControlVector,
    map: &SensitivityMap,
    schedule: &[SetPoint],
    ctrl: &ControllerConfig,
    noise: &NoiseConfig,
    trial: u64,
) -> Result<Trajectory, String> {
    let map = trial_map(map, noise, trial);
    let disturbance = TrialDisturbance { cfg: noise, trial };
    run_schedule(grid, u0, &map, schedule, ctrl, &disturbance).map_err(|e| e.to_string())
}

/// Runs `n_trials` independent trials of one schedule. Output order is trial
/// order whatever the thread count.
#[allow(clippy::too_many_arguments)]
pub fn run_monte_carlo(
    grid: &GridModel,
    u0: &ControlVector,
    map: &SensitivityMap,
    schedule: &[SetPoint],
    ctrl: &ControllerConfig,
    noise: &NoiseConfig,
    n_trials: usize,
    opts: &McOptions,
) -> Result<McResult, NoiseError> {
    run_monte_carlo_cycled(grid, u0, map, &[schedule.to_vec()], ctrl, noise, n_trials, opts)
}

/// Like [`run_monte_carlo`], with trial `i` running `schedules[i % len]`.
#[allow(clippy::too_many_arguments)]
pub fn run_monte_carlo_cycled(
    grid: &GridModel,
    u0: &ControlVector,
    map: &SensitivityMap,
    schedules: &[Vec<SetPoint>],
    ctrl: &ControllerConfig,
    noise: &NoiseConfig,
    n_trials: usize,
    opts: &McOptions,
) -> Result<McResult, NoiseError> {
    noise.validate(grid)?;
    if schedules.is_empty() {
        return Err(NoiseError::NoSchedule);
    }
    let work = || -> Vec<(u64, Result<Trajectory, String>)> {
        (0..n_trials as u64)
            .into_par_iter()
            .map(|trial| {
                if opts.inject_failures.contains(&trial) {
                    return (trial, Err("injected fault".to_string()));
                }
                let schedule = &schedules[trial as usize % schedules.len()];
                (trial, run_trial(grid, u0, map, schedule, ctrl, noise, trial))
            })
            .collect()
    };
    let outcomes = match opts.jobs {
        None => work(),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| NoiseError::Pool(e.to_string()))?
            .install(work),
    };

    let mut trajectories = Vec::new();
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    for (trial, r) in outcomes {
        match r {
            Ok(t) => {
                trajectories.push(t);
                trials.push(trial);
            }
            Err(reason) => failures.push(TrialFailure { trial, reason }),
        }
    }
    let set = TrajectorySet {
        trajectories,
        provenance: Provenance { config_hash: String::new(), master_seed: noise.seed, trials },
    };
    Ok(McResult { set, failures })
}

/// Which projected states enter a histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFilter {
    All,
    /// States outside the region.
    Critical,
    AtIteration(usize),
    /// Iterations `start..=end`.
    IterationWindow {
        start: usize,
        end: usize,
    },
}

impl StateFilter {
    pub fn name(&self) -> String {
        match self {
            StateFilter::All => "all".into(),
            StateFilter::Critical => "critical".into(),
            StateFilter::AtIteration(k) => format!("k{k}"),
            StateFilter::IterationWindow { start, end } => format!("k{start}-{end}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub p_edges: Vec<f64>,
    pub q_edges: Vec<f64>,
    /// `counts[i * n_q + j]` for p-bin `i` and q-bin `j`.
    pub counts: Vec<u64>,
    pub n_total: u64,
    pub filter: StateFilter,
}

impl DensityHistogram {
    pub fn n_p(&self) -> usize {
        self.p_edges.len() - 1
    }

    pub fn n_q(&self) -> usize {
        self.q_edges.len() - 1
    }

    pub fn area(&self, i: usize, j: usize) -> f64 {
        (self.p_edges[i + 1] - self.p_edges[i]) * (self.q_edges[j + 1] - self.q_edges[j])
    }

    /// `ρ = n / (a · n_total)`, zero for an empty histogram.
    pub fn density(&self, i: usize, j: usize) -> f64 {
        if self.n_total == 0 {
            return 0.0;
        }
        self.counts[i * self.n_q() + j] as f64 / (self.area(i, j) * self.n_total as f64)
    }

    /// `Σ ρ·a`: 1 for any nonempty histogram.
    pub fn mass(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n_p() {
            for j in 0..self.n_q() {
                s += self.density(i, j) * self.area(i, j);
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("p_center,q_center,n,area,rho\n");
        for i in 0..self.n_p() {
            for j in 0..self.n_q() {
                let pc = 0.5 * (self.p_edges[i] + self.p_edges[i + 1]);
                let qc = 0.5 * (self.q_edges[j] + self.q_edges[j + 1]);
                out.push_str(&format!(
                    "{pc},{qc},{},{},{}\n",
                    self.counts[i * self.n_q() + j],
                    self.area(i, j),
                    self.density(i, j)
                ));
            }
        }
        out
    }
}

fn selected_points(set: &TrajectorySet, f: &ForPolygon, filter: StateFilter, tol: f64) -> Vec<Point> {
    let mut out = Vec::new();
    for t in &set.trajectories {
        for (k, p) in t.project().points.into_iter().enumerate() {
            let Some(p) = p else { continue };
            let keep = match filter {
                StateFilter::All => true,
                StateFilter::Critical => !contains(f, p, tol),
                StateFilter::AtIteration(at) => k == at,
                StateFilter::IterationWindow { start, end } => (start..=end).contains(&k),
            };
            if keep {
                out.push(p);
            }
        }
    }
    out
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let mut e: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    e[n] = hi;
    e
}

fn bin_of(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    // the last bin is closed on the right
    edges[1..n].partition_point(|&e| e <= x).min(n - 1)
}

/// Histogram of projected states on a `bins × bins` grid spanning the region's
/// bounding box, widened to include every selected point.
pub fn density_histogram(
    set: &TrajectorySet,
    f: &ForPolygon,
    bins: usize,
    filter: StateFilter,
    tol: f64,
) -> DensityHistogram {
    let bins = bins.max(1);
    let points = selected_points(set, f, filter, tol);
    let (mut p0, mut p1, mut q0, mut q1) = f.bbox();
    for &(p, q) in &points {
        p0 = p0.min(p);
        p1 = p1.max(p);
        q0 = q0.min(q);
        q1 = q1.max(q);
    }
    let p_edges = edges(p0, p1, bins);
    let q_edges = edges(q0, q1, bins);
    let mut counts = vec![0u64; bins * bins];
    for &(p, q) in &points {
        counts[bin_of(&p_edges, p) * bins + bin_of(&q_edges, q)] += 1;
    }
    DensityHistogram { p_edges, q_edges, counts, n_total: points.len() as u64, filter }
}

/// Share of trajectories with at least one state outside the region.
pub fn critical_fraction(set: &TrajectorySet, f: &ForPolygon, tol: f64) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    critical_count(set, f, tol) as f64 / set.len() as f64
}

pub fn critical_count(set: &TrajectorySet, f: &ForPolygon, tol: f64) -> usize {
    set.trajectories.iter().filter(|t| t.project().points.iter().flatten().any(|&p| !contains(f, p, tol))).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: u64,
    pub final_error: Option<f64>,
    pub converged: bool,
    pub aborted: bool,
    /// States outside the region.
    pub n_critical: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub master_seed: u64,
    pub n_trials: usize,
    pub n_failed: usize,
    pub convergence_rate: f64,
    pub critical_fraction: f64,
    /// 95% Wilson interval of the critical fraction.
    pub critical_interval: (f64, f64),
    pub trials: Vec<TrialSummary>,
    pub failures: Vec<TrialFailure>,
}

impl EnsembleSummary {
    pub fn new(result: &McResult, f: &ForPolygon, tol: f64) -> Self {
        let set = &result.set;
        let trials: Vec<TrialSummary> = set
            .trajectories
            .iter()
            .zip(&set.provenance.trials)
            .map(|(t, &trial)| TrialSummary {
                trial,
                final_error: t.final_error(),
                converged: t.converged(),
                aborted: t.abort.is_some(),
                n_critical: t.project().points.iter().flatten().filter(|&&p| !contains(f, p, tol)).count(),
            })
            .collect();
        let n = trials.len();
        let critical = critical_count(set, f, tol);
        let converged = trials.iter().filter(|t| t.converged).count();
        EnsembleSummary {
            master_seed: set.provenance.master_seed,
            n_trials: n + result.failures.len(),
            n_failed: result.failures.len(),
            convergence_rate: if n == 0 { 0.0 } else { converged as f64 / n as f64 },
            critical_fraction: if n == 0 { 0.0 } else { critical as f64 / n as f64 },
            critical_interval: wilson_interval(critical, n, 1.959_963_984_540_054),
            trials,
            failures: result.failures.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const THREE_LOADS: &str = r#"{
        "s_base_mva": 100,
        "buses": [{"id": "1", "type": "slack", "v_kv": 20}, {"id": "2", "type": "pq", "v_kv": 20}],
        "branches": [{"id": "l", "from": "1", "to": "2", "r_pu": 0.01, "x_pu": 0.05}],
        "flex_units": [],
        "loads": [
            {"id": "h", "bus": "2", "p_mw": 10, "q_mvar": 2, "class": "household"},
            {"id": "i", "bus": "2", "p_mw": 20, "q_mvar": 4, "class": "industry"},
            {"id": "c", "bus": "2", "p_mw": 5, "q_mvar": 1, "class": "commercial"}
        ],
        "pcc_branch": "l"
    }"#;

    #[test]
    fn zero_sigma_leaves_grid() {
        let g = parse_grid(THREE_LOADS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_load_noise(&g, &NoiseConfig::default(), &mut rng), g);
    }

    #[test]
    fn class_selectivity() {
        let g = parse_grid(THREE_LOADS).unwrap();
        let cfg = NoiseConfig { load_sigma: LoadSigma { household: 0.1, ..Default::default() }, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = sample_load_noise(&g, &cfg, &mut rng);
        assert_ne!(noisy.fixed_loads[0], g.fixed_loads[0]);
        assert_eq!(noisy.fixed_loads[1], g.fixed_loads[1]);
        assert_eq!(noisy.fixed_loads[2], g.fixed_loads[2]);
    }

    #[test]
    fn covariance_shape_checked() {
        let g = parse_grid(THREE_LOADS).unwrap();
        let cfg = NoiseConfig { load_covariance: Some(vec![vec![1.0; 3]; 3]), ..Default::default() };
        assert!(cfg.validate(&g).is_err());
        let mut diag = vec![vec![0.0; 6]; 6];
        diag[0][0] = 0.01;
        let cfg = NoiseConfig { load_covariance: Some(diag), ..Default::default() };
        cfg.validate(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = sample_load_noise(&g, &cfg, &mut rng);
        assert_ne!(noisy.fixed_loads[0].p, g.fixed_loads[0].p);
        assert!((noisy.fixed_loads[1].p - g.fixed_loads[1].p).abs() < 1e-6);
    }

    #[test]
    fn histogram_single_state() {
        let f = ForPolygon::from_vertices(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let set = TrajectorySet::new(vec![Trajectory::from_points(&[(0.3, 0.3)], &[0])]);
        let h = density_histogram(&set, &f, 1, StateFilter::All, 1e-3);
        assert_eq!(h.n_total, 1);
        assert_eq!(h.density(0, 0), 1.0 / h.area(0, 0));
        let two = TrajectorySet::new(vec![Trajectory::from_points(&[(0.25, 0.5), (0.75, 0.5)], &[1])]);
        let h = density_histogram(&two, &f, 2, StateFilter::All, 1e-3);
        assert_eq!(h.density(0, 1), h.density(1, 1));
        assert!((h.mass() - 1.0).abs() < 1e-12);
        let none = density_histogram(&two, &f, 2, StateFilter::Critical, 1e-3);
        assert_eq!(none.n_total, 0);
        assert_eq!(none.mass(), 0.0);
    }

    #[test]
    fn critical_fraction_counts_trajectories() {
        let f = ForPolygon::from_vertices(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let inside = Trajectory::from_points(&[(0.5, 0.5), (0.6, 0.5)], &[1]);
        let outside = Trajectory::from_points(&[(0.5, 0.5), (3.0, 0.5), (0.5, 0.5)], &[2]);
        let set = TrajectorySet::new(vec![inside.clone(), outside.clone(), inside.clone(), outside, inside]);
        assert!((critical_fraction(&set, &f, 1e-3) - 0.4).abs() < 1e-15);
    }
}
