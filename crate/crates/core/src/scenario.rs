//! Scenario documents and the three batch commands built on them.
//!
//! A scenario is one JSON file naming a grid, a controller, a schedule, a
//! noise model and output settings. Each command is a pure function of the
//! scenario plus overrides; it returns every output file in memory and the
//! caller writes them in one go.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    robustness_verdict, trajectory_csv, Provenance, RobustnessReport, TrajectorySet, VerdictReport, COVERAGE_GRID,
};
use crate::controller::{ControllerConfig, GridLimits, SetPoint};
use crate::grid::{apply_control, grid_to_json, load_grid, ControlVector, GridModel};
use crate::power_flow::solve_power_flow;
use crate::region::{initial_state, sample_oracle_for, sweep_for, AngleFailure, ForPolygon, RegionError, SweepOptions};
use crate::sensitivity::{compute_sensitivity, SensitivityMap};
use crate::uncertainty::{
    density_histogram, run_monte_carlo_cycled, run_trial, EnsembleSummary, McOptions, NoiseConfig, StateFilter,
    TrialFailure,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write outputs: {0}")]
    Output(String),
}

impl ScenarioError {
    /// 1 for bad input or unwritable output, 2 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) | ScenarioError::Output(_) => 1,
            ScenarioError::Numerical(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleDirective {
    /// One run per FOR sweep vertex, each starting from the initial point.
    #[serde(rename = "hull-vertices")]
    HullVertices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Directive(ScheduleDirective),
    /// Set points (p.u.) tracked one after another in a single run.
    Points(Vec<SetPoint>),
}

impl ScheduleSpec {
    /// Explicit set points, `None` for a directive.
    pub fn points(&self) -> Option<&[SetPoint]> {
        match self {
            ScheduleSpec::Points(p) => Some(p),
            ScheduleSpec::Directive(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Grid file, relative to the scenario file.
    pub grid: PathBuf,
    pub controller: ControllerConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_tol")]
    pub containment_tol: f64,
    /// Samples for the FOR cross-check; 0 skips it.
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    #[serde(default)]
    pub oracle_seed: u64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Inclusive iteration range of the windowed histogram.
    #[serde(default = "default_window")]
    pub iteration_window: [usize; 2],
    /// Trials forced to fail (exercises the failure manifest).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inject_failures: Vec<u64>,
    /// Output directory, relative to the scenario file.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_trials() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-3
}
fn default_oracle_samples() -> usize {
    20_000
}
fn default_bins() -> usize {
    40
}
fn default_window() -> [usize; 2] {
    [0, 5]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        self.controller.validate().map_err(|e| ScenarioError::Config(e.to_string()))?;
        if self.sweep.n_angles < 4 {
            return bad(format!("sweep.n_angles must be at least 4, got {}", self.sweep.n_angles));
        }
        if !(self.sweep.step > 0.0) || self.sweep.max_iterations == 0 || !(self.sweep.stationarity_tol > 0.0) {
            return bad("sweep step, max_iterations and stationarity_tol must be positive".into());
        }
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        if !(self.containment_tol >= 0.0) {
            return bad("containment_tol must be non-negative".into());
        }
        if self.oracle_samples != 0 && self.oracle_samples < 1000 {
            return bad(format!("oracle_samples must be 0 or at least 1000, got {}", self.oracle_samples));
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        if self.iteration_window[0] > self.iteration_window[1] {
            return bad("iteration_window must be [start, end] with start <= end".into());
        }
        if let ScheduleSpec::Points(points) = &self.schedule {
            if points.is_empty() {
                return bad("schedule has no set points".into());
            }
            if points.iter().any(|s| !(s.p.is_finite() && s.q.is_finite())) {
                return bad("schedule set points must be finite".into());
            }
        }
        Ok(())
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A validated scenario with its grid loaded.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: GridModel,
    /// Resolved output directory.
    pub output: PathBuf,
    pub jobs: Option<usize>,
    /// SHA-256 over the effective config and the grid.
    pub config_hash: String,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(config, base, overrides)
    }

    pub fn from_config(mut config: ScenarioConfig, base: &Path, overrides: &Overrides) -> Result<Self, ScenarioError> {
        if let Some(seed) = overrides.seed {
            config.noise.seed = seed;
        }
        if overrides.jobs == Some(0) {
            return Err(ScenarioError::Config("--jobs must be at least 1".into()));
        }
        config.validate()?;
        let grid_path = base.join(&config.grid);
        let grid = load_grid(&grid_path).map_err(|e| ScenarioError::Config(format!("{}: {e}", grid_path.display())))?;
        config.noise.validate(&grid).map_err(|e| ScenarioError::Config(e.to_string()))?;
        let output = overrides.out.clone().unwrap_or_else(|| base.join(&config.output));
        let config_hash = hash_scenario(&config, &grid);
        Ok(Scenario { config, grid, output, jobs: overrides.jobs, config_hash })
    }

    fn provenance(&self, trials: Vec<u64>) -> Provenance {
        Provenance { config_hash: self.config_hash.clone(), master_seed: self.config.noise.seed, trials }
    }
}

fn hash_scenario(config: &ScenarioConfig, grid: &GridModel) -> String {
    // the output location does not change results
    let mut c = config.clone();
    c.output = PathBuf::new();
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&c).expect("config serializes"));
    h.update(grid_to_json(grid));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Files produced by a command, plus the error to report once they are written.
#[derive(Debug)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    /// One-line human summary.
    pub summary: String,
    pub failure: Option<ScenarioError>,
}

impl Artifacts {
    fn new() -> Self {
        Artifacts { files: Vec::new(), summary: String::new(), failure: None }
    }

    fn add(&mut self, name: &str, body: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), body.into()));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.add(name, text);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn write(&self, dir: &Path) -> Result<(), ScenarioError> {
        let err = |e: std::io::Error| ScenarioError::Output(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(err)?;
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body).map_err(err)?;
        }
        Ok(())
    }
}

fn region(s: &Scenario) -> Result<ForPolygon, ScenarioError> {
    sweep_for(&s.grid, &s.config.sweep).map_err(|e| match e {
        RegionError::TooFewAngles(_) => ScenarioError::Config(e.to_string()),
        other => ScenarioError::Numerical(other.to_string()),
    })
}

fn operating_point(s: &Scenario) -> Result<(ControlVector, SensitivityMap), ScenarioError> {
    let (u0, _) = initial_state(&s.grid).map_err(|e| ScenarioError::Numerical(e.to_string()))?;
    let map = compute_sensitivity(&s.grid, &u0).map_err(|e| ScenarioError::Numerical(e.to_string()))?;
    Ok((u0, map))
}

fn schedules(s: &Scenario, f: &ForPolygon) -> Vec<Vec<SetPoint>> {
    match &s.config.schedule {
        ScheduleSpec::Directive(ScheduleDirective::HullVertices) => {
            f.vertices.iter().map(|&(p, q)| vec![SetPoint::new(p, q)]).collect()
        }
        ScheduleSpec::Points(points) => vec![points.clone()],
    }
}

fn in_pool<T: Send>(jobs: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T, ScenarioError> {
    match jobs {
        None => Ok(work()),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map(|pool| pool.install(work))
            .map_err(|e| ScenarioError::Config(format!("thread pool: {e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub n_samples: usize,
    pub seed: u64,
    pub n_feasible: usize,
    pub n_infeasible: usize,
    pub n_diverged: usize,
    pub n_contained: usize,
    pub containment_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForSummary {
    pub config_hash: String,
    pub n_angles: usize,
    pub n_vertices: usize,
    pub area: f64,
    pub center: (f64, f64),
    pub failures: Vec<AngleFailure>,
    /// Largest PCC distance between a vertex and a fresh power flow at its control.
    pub vertex_resim_error: f64,
    /// Largest limit violation among those re-simulated states.
    pub vertex_resim_violation: f64,
    pub oracle: Option<OracleCheck>,
}

/// Re-solves every vertex's control from a flat start: `(max PCC error, max violation)`.
pub fn resimulate_vertices(grid: &GridModel, f: &ForPolygon) -> Result<(f64, f64), String> {
    let limits = GridLimits::of(grid);
    let mut worst = (0.0f64, 0.0f64);
    for (v, u) in f.vertices.iter().zip(&f.controls) {
        let (applied, _) = apply_control(grid, &ControlVector(u.clone())).map_err(|e| e.to_string())?;
        let state = solve_power_flow(&applied, None).map_err(|e| e.to_string())?;
        if !state.converged {
            return Err(format!("vertex ({}, {}) does not re-solve", v.0, v.1));
        }
        let (p, q) = state.pcc();
        worst.0 = worst.0.max((p - v.0).hypot(q - v.1));
        worst.1 = worst.1.max(limits.violation(&state));
    }
    Ok(worst)
}

/// FOR polygon CSV plus a summary with vertex re-simulation and the oracle cross-check.
pub fn cmd_for(s: &Scenario) -> Result<Artifacts, ScenarioError> {
    in_pool(s.jobs, || {
        let f = region(s)?;
        let (err, violation) = resimulate_vertices(&s.grid, &f).map_err(ScenarioError::Numerical)?;
        let oracle = if s.config.oracle_samples == 0 {
            None
        } else {
            let cloud = sample_oracle_for(&s.grid, s.config.oracle_samples, s.config.oracle_seed)
                .map_err(|e| ScenarioError::Numerical(e.to_string()))?;
            let n_contained = cloud.feasible.iter().filter(|&&p| f.contains(p, s.config.containment_tol)).count();
            Some(OracleCheck {
                n_samples: cloud.n_samples,
                seed: s.config.oracle_seed,
                n_feasible: cloud.feasible.len(),
                n_infeasible: cloud.n_infeasible,
                n_diverged: cloud.n_diverged,
                n_contained,
                containment_fraction: if cloud.feasible.is_empty() {
                    1.0
                } else {
                    n_contained as f64 / cloud.feasible.len() as f64
                },
            })
        };
        let summary = ForSummary {
            config_hash: s.config_hash.clone(),
            n_angles: s.config.sweep.n_angles,
            n_vertices: f.vertices.len(),
            area: f.area(),
            center: f.center,
            failures: f.failures.clone(),
            vertex_resim_error: err,
            vertex_resim_violation: violation,
            oracle,
        };
        let mut out = Artifacts::new();
        out.add("for.csv", f.to_csv());
        out.add_json("for_summary.json", &summary);
        out.summary =
            format!("FOR: {} of {} angles, area {:.6} p.u.^2", f.vertices.len(), summary.n_angles, summary.area);
        if let Some(o) = &summary.oracle {
            out.summary
                .push_str(&format!(", containment {:.4} ({}/{})", o.containment_fraction, o.n_contained, o.n_feasible));
        }
        Ok(out)
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub config_hash: String,
    pub master_seed: u64,
    pub n_targets: usize,
    pub n_targets_reached: usize,
    pub aborted: Vec<usize>,
    #[serde(flatten)]
    pub report: VerdictReport,
}

/// Runs the schedule (one run per vertex for `hull-vertices`) and classifies the result.
pub fn cmd_run(s: &Scenario) -> Result<Artifacts, ScenarioError> {
    in_pool(s.jobs, || {
        let f = region(s)?;
        let (u0, map) = operating_point(s)?;
        let runs = schedules(s, &f);
        let results: Vec<_> = runs
            .par_iter()
            .enumerate()
            .map(|(i, sched)| run_trial(&s.grid, &u0, &map, sched, &s.config.controller, &s.config.noise, i as u64))
            .collect();
        let mut trajectories = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            trajectories.push(r.map_err(|e| ScenarioError::Numerical(format!("run {i}: {e}")))?);
        }
        let set = TrajectorySet { provenance: s.provenance((0..trajectories.len() as u64).collect()), trajectories };
        let report = VerdictReport::new(&set, &f, s.config.containment_tol, &COVERAGE_GRID);
        let segments = set.trajectories.iter().flat_map(|t| &t.segments);
        let verdict = RunVerdict {
            config_hash: s.config_hash.clone(),
            master_seed: s.config.noise.seed,
            n_targets: segments.clone().count(),
            n_targets_reached: segments.filter(|g| g.converged).count(),
            aborted: set.trajectories.iter().enumerate().filter(|(_, t)| t.abort.is_some()).map(|(i, _)| i).collect(),
            report,
        };

        let mut out = Artifacts::new();
        out.add("for.csv", f.to_csv());
        out.add("trajectory.csv", trajectory_csv(&set, &s.grid.control_labels()));
        out.add_json("verdict.json", &verdict);
        out.summary = format!(
            "run: {}/{} targets reached, verdict {:?}",
            verdict.n_targets_reached, verdict.n_targets, verdict.report.class
        );
        if let Some(&i) = verdict.aborted.first() {
            let reason = set.trajectories[i].abort.clone().unwrap_or_default();
            out.failure = Some(ScenarioError::Numerical(format!("run {i} aborted: {reason}")));
        }
        Ok(out)
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramCheck {
    pub file: String,
    pub n_total: u64,
    /// `Σ ρ·a`, 1 for nonempty histograms.
    pub mass: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config_hash: String,
    pub robust: Option<bool>,
    pub robustness: Option<RobustnessReport>,
    pub histograms: Vec<HistogramCheck>,
    #[serde(flatten)]
    pub ensemble: EnsembleSummary,
}

/// Tolerance of the histogram self-check.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Monte Carlo ensemble: density histograms, critical fraction, robustness verdict
/// and a failure manifest.
pub fn cmd_mc(s: &Scenario) -> Result<Artifacts, ScenarioError> {
    in_pool(s.jobs, || {
        let f = region(s)?;
        let (u0, map) = operating_point(s)?;
        let runs = schedules(s, &f);
        let opts = McOptions { jobs: None, inject_failures: s.config.inject_failures.clone() };
        let mut result = run_monte_carlo_cycled(
            &s.grid,
            &u0,
            &map,
            &runs,
            &s.config.controller,
            &s.config.noise,
            s.config.n_trials,
            &opts,
        )
        .map_err(|e| ScenarioError::Config(e.to_string()))?;
        result.set.provenance.config_hash = s.config_hash.clone();
        let set = &result.set;
        let tol = s.config.containment_tol;

        let [w0, w1] = s.config.iteration_window;
        let filters = [
            ("density_all.csv", StateFilter::All),
            ("density_window.csv", StateFilter::IterationWindow { start: w0, end: w1 }),
            ("density_critical.csv", StateFilter::Critical),
        ];
        let mut out = Artifacts::new();
        let mut checks = Vec::new();
        for (file, filter) in filters {
            let h = density_histogram(set, &f, s.config.histogram_bins, filter, tol);
            let mass = h.mass();
            let ok = if h.n_total == 0 { mass == 0.0 } else { (mass - 1.0).abs() <= MASS_TOLERANCE };
            checks.push(HistogramCheck { file: file.to_string(), n_total: h.n_total, mass, ok });
            out.add(file, h.to_csv());
        }

        let robustness = if set.is_empty() { None } else { robustness_verdict(&[(set.clone(), f.clone())], tol).ok() };
        let report = McReport {
            config_hash: s.config_hash.clone(),
            robust: robustness.as_ref().map(|r| r.robust),
            robustness,
            histograms: checks,
            ensemble: EnsembleSummary::new(&result, &f, tol),
        };
        out.add("for.csv", f.to_csv());
        out.add_json("summary.json", &report);
        out.add_json("failures.json", &result.failures);
        out.summary = format!(
            "mc: {} trials, {} failed, convergence {:.3}, critical fraction {:.3} [{:.3}, {:.3}], robust {}",
            report.ensemble.n_trials,
            report.ensemble.n_failed,
            report.ensemble.convergence_rate,
            report.ensemble.critical_fraction,
            report.ensemble.critical_interval.0,
            report.ensemble.critical_interval.1,
            report.robust.map_or("n/a".to_string(), |r| r.to_string())
        );
        out.failure = if set.is_empty() {
            Some(ScenarioError::Numerical(format!("all {} trials failed", result.failures.len())))
        } else {
            let bad = report.histograms.iter().find(|c| !c.ok);
            bad.map(|b| ScenarioError::Numerical(format!("{} fails normalization: mass {}", b.file, b.mass)))
        };
        Ok(out)
    })?
}

/// Failures recorded by an ensemble, as written to `failures.json`.
pub fn read_failure_manifest(path: impl AsRef<Path>) -> Result<Vec<TrialFailure>, ScenarioError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ScenarioError::Config(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    For,
    Run,
    Mc,
}

/// Loads the scenario, runs the command, writes all outputs, and returns the
/// process exit code. Diagnostics go to stderr, the summary to stdout.
pub fn execute(command: Command, config: &Path, overrides: &Overrides) -> i32 {
    let result = Scenario::load(config, overrides).and_then(|s| {
        let artifacts = match command {
            Command::For => cmd_for(&s),
            Command::Run => cmd_run(&s),
            Command::Mc => cmd_mc(&s),
        }?;
        artifacts.write(&s.output)?;
        Ok(artifacts)
    });
    match result {
        Ok(a) => {
            println!("{}", a.summary);
            match a.failure {
                Some(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
