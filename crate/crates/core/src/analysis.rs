//! Trajectory records, PQ projections and safety classification against a
//! feasible operating region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{cost, OfoStep, SetPoint};
use crate::geometry::{self, Point};
use crate::grid::ControlVector;
use crate::power_flow::SystemState;
use crate::qp::QpStatus;
use crate::region::{contains, ForPolygon};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no evidence: at least one trajectory set is required")]
    NoEvidence,
    #[error("trajectory set is empty")]
    EmptySet,
}

/// One set point of a schedule and where its run ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub target: SetPoint,
    /// State index at which this set point took effect.
    pub start: usize,
    /// First state within tolerance of the target, else the last state spent on it.
    pub final_index: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<SystemState>,
    /// `controls[k]` is the input in force while `states[k]` settled.
    pub controls: Vec<ControlVector>,
    /// `steps[k]` was computed from `states[k]`.
    pub steps: Vec<OfoStep>,
    pub segments: Vec<Segment>,
    /// Diagnostic when the run stopped early.
    pub abort: Option<String>,
}

impl Trajectory {
    pub fn start(state: SystemState, u: ControlVector) -> Self {
        Trajectory { states: vec![state], controls: vec![u], steps: Vec::new(), segments: Vec::new(), abort: None }
    }

    /// A trajectory of bare PCC points, for analysis tests and synthetic sets.
    /// `finals` are the final-state indices, one per segment.
    pub fn from_points(points: &[Point], finals: &[usize]) -> Self {
        let states: Vec<SystemState> = points
            .iter()
            .map(|&(p, q)| SystemState {
                v: Vec::new(),
                theta: Vec::new(),
                s_flows: Vec::new(),
                p_pcc: p,
                q_pcc: q,
                converged: true,
                iterations: 0,
                mismatch: 0.0,
            })
            .collect();
        let mut start = 0;
        let segments = finals
            .iter()
            .map(|&f| {
                let (p, q) = points[f];
                let s = Segment { target: SetPoint::new(p, q), start, final_index: f, converged: true };
                start = f;
                s
            })
            .collect();
        Trajectory {
            controls: vec![ControlVector(Vec::new()); states.len()],
            states,
            steps: Vec::new(),
            segments,
            abort: None,
        }
    }

    pub fn y0(&self) -> &SystemState {
        &self.states[0]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Final-state index of the last set point.
    pub fn k_f(&self) -> usize {
        self.segments.last().map_or(0, |s| s.final_index)
    }

    pub fn converged(&self) -> bool {
        self.abort.is_none() && !self.segments.is_empty() && self.segments.iter().all(|s| s.converged)
    }

    pub fn final_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().map(|s| s.final_index)
    }

    /// Set point in force at state `k` (the later one where two segments meet).
    pub fn target_at(&self, k: usize) -> Option<SetPoint> {
        self.segments.iter().rev().find(|s| s.start <= k).map(|s| s.target)
    }

    pub fn project(&self) -> PqProjection {
        project_trajectory(self)
    }

    /// Distance between the last final state and its set point.
    pub fn final_error(&self) -> Option<f64> {
        let seg = self.segments.last()?;
        Some(seg.target.distance(self.states[seg.final_index].pcc()))
    }
}

/// PCC flow per state; `None` marks a state whose power flow did not converge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqProjection {
    pub points: Vec<Option<Point>>,
}

impl PqProjection {
    pub fn gaps(&self) -> impl Iterator<Item = usize> + '_ {
        self.points.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(k, _)| k)
    }
}

pub fn project_trajectory(t: &Trajectory) -> PqProjection {
    PqProjection { points: t.states.iter().map(|s| s.converged.then(|| s.pcc())).collect() }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    /// Trial index of each trajectory.
    pub trials: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub provenance: Provenance,
}

impl TrajectorySet {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        let trials = (0..trajectories.len() as u64).collect();
        TrajectorySet { trajectories, provenance: Provenance { trials, ..Default::default() } }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SafetyClass {
    Safe,
    ConditionallySafe,
    Unsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub trajectory: usize,
    pub k: usize,
    pub point: Point,
    pub final_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub class: SafetyClass,
    /// States outside the region. Final states among them make the set unsafe.
    pub witnesses: Vec<Witness>,
    /// `(trajectory, k)` of non-converged states left out of the check.
    pub gaps: Vec<(usize, usize)>,
}

impl SafetyVerdict {
    pub fn final_witnesses(&self) -> impl Iterator<Item = &Witness> {
        self.witnesses.iter().filter(|w| w.final_state)
    }

    pub fn conditionally_safe(&self) -> bool {
        self.final_witnesses().next().is_none()
    }
}

/// Safe if every state lies in `f`; conditionally safe if at least every
/// final state does; unsafe otherwise.
pub fn classify(set: &TrajectorySet, f: &ForPolygon, tol: f64) -> SafetyVerdict {
    let mut witnesses = Vec::new();
    let mut gaps = Vec::new();
    for (i, t) in set.trajectories.iter().enumerate() {
        let finals: Vec<usize> = t.final_indices().collect();
        for (k, p) in t.project().points.into_iter().enumerate() {
            match p {
                None => gaps.push((i, k)),
                Some(p) if !contains(f, p, tol) => {
                    witnesses.push(Witness { trajectory: i, k, point: p, final_state: finals.contains(&k) })
                }
                Some(_) => {}
            }
        }
    }
    let class = if witnesses.is_empty() {
        SafetyClass::Safe
    } else if witnesses.iter().all(|w| !w.final_state) {
        SafetyClass::ConditionallySafe
    } else {
        SafetyClass::Unsafe
    };
    let verdict = SafetyVerdict { class, witnesses, gaps };
    assert!(
        verdict.class == SafetyClass::Unsafe || verdict.conditionally_safe(),
        "safe set without conditional safety"
    );
    verdict
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub set: usize,
    pub class: SafetyClass,
    pub n_witnesses: usize,
    pub n_final_witnesses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub robust: bool,
    pub entries: Vec<RobustnessEntry>,
}

impl RobustnessReport {
    /// Sets that are not safe.
    pub fn offenders(&self) -> impl Iterator<Item = &RobustnessEntry> {
        self.entries.iter().filter(|e| e.class != SafetyClass::Safe)
    }
}

/// Robust iff every set classifies safe against its own region.
pub fn robustness_verdict(sets: &[(TrajectorySet, ForPolygon)], tol: f64) -> Result<RobustnessReport, AnalysisError> {
    if sets.is_empty() {
        return Err(AnalysisError::NoEvidence);
    }
    let entries: Vec<RobustnessEntry> = sets
        .iter()
        .enumerate()
        .map(|(i, (set, f))| {
            let v = classify(set, f, tol);
            RobustnessEntry {
                set: i,
                class: v.class,
                n_witnesses: v.witnesses.len(),
                n_final_witnesses: v.final_witnesses().count(),
            }
        })
        .collect();
    Ok(RobustnessReport { robust: entries.iter().all(|e| e.class == SafetyClass::Safe), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub k: usize,
    pub fraction: f64,
    pub distinct_endpoints: usize,
    /// Fewer than three distinct endpoints: the fraction is reported as 0.
    pub degenerate: bool,
}

/// Share of `f`'s area spanned by the trajectory endpoints at iteration `k`,
/// ordered by angle around the sweep center. Trajectories shorter than `k`
/// contribute their last converged state.
pub fn coverage_metric(set: &TrajectorySet, f: &ForPolygon, k: usize) -> Coverage {
    let mut endpoints: Vec<Point> = set
        .trajectories
        .iter()
        .filter_map(|t| {
            let proj = t.project();
            let upto = k.min(proj.points.len().saturating_sub(1));
            proj.points[..=upto].iter().rev().find_map(|p| *p)
        })
        .collect();
    let mut distinct = endpoints.clone();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup_by(|a, b| (a.0 - b.0).hypot(a.1 - b.1) < 1e-12);
    if distinct.len() < 3 {
        return Coverage { k, fraction: 0.0, distinct_endpoints: distinct.len(), degenerate: true };
    }
    geometry::sort_by_angle(&mut endpoints, f.center);
    Coverage {
        k,
        fraction: geometry::area(&endpoints) / f.area(),
        distinct_endpoints: distinct.len(),
        degenerate: false,
    }
}

pub const COVERAGE_GRID: [usize; 10] = [0, 1, 2, 5, 10, 20, 50, 100, 200, 500];

pub fn coverage_table(set: &TrajectorySet, f: &ForPolygon, ks: &[usize]) -> Vec<Coverage> {
    ks.iter().map(|&k| coverage_metric(set, f, k)).collect()
}

/// Verdict document written next to trajectory outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub class: SafetyClass,
    pub witnesses: Vec<Witness>,
    pub gaps: Vec<(usize, usize)>,
    pub coverage: Vec<Coverage>,
    pub n_trajectories: usize,
    pub n_converged: usize,
    pub tolerance: f64,
}

impl VerdictReport {
    pub fn new(set: &TrajectorySet, f: &ForPolygon, tol: f64, coverage_ks: &[usize]) -> Self {
        let v = classify(set, f, tol);
        VerdictReport {
            class: v.class,
            witnesses: v.witnesses,
            gaps: v.gaps,
            coverage: coverage_table(set, f, coverage_ks),
            n_trajectories: set.len(),
            n_converged: set.trajectories.iter().filter(|t| t.converged()).count(),
            tolerance: tol,
        }
    }
}

fn status_name(s: QpStatus) -> &'static str {
    match s {
        QpStatus::Optimal => "optimal",
        QpStatus::MaxIter => "max_iter",
        QpStatus::Infeasible => "infeasible",
    }
}

/// Per-state CSV rows: `trajectory,k,<u labels>,p_pcc,q_pcc,phi,qp_status,n_active,active_constraints`.
/// `phi` is evaluated on the true state; the last state of a run has no step.
pub fn trajectory_csv(set: &TrajectorySet, u_labels: &[String]) -> String {
    let mut out = String::from("trajectory,k");
    for l in u_labels {
        out.push(',');
        out.push_str(l);
    }
    out.push_str(",p_pcc,q_pcc,phi,qp_status,n_active,active_constraints\n");
    for (i, t) in set.trajectories.iter().enumerate() {
        let id = set.provenance.trials.get(i).copied().unwrap_or(i as u64);
        for (k, state) in t.states.iter().enumerate() {
            out.push_str(&format!("{id},{k}"));
            for x in &t.controls[k].0 {
                out.push_str(&format!(",{x}"));
            }
            let phi = t.target_at(k).map_or(f64::NAN, |s| cost(state.pcc(), s));
            if state.converged {
                out.push_str(&format!(",{},{},{phi}", state.p_pcc, state.q_pcc));
            } else {
                out.push_str(",,,");
            }
            match t.steps.get(k) {
                Some(step) => out.push_str(&format!(
                    ",{},{},{}\n",
                    status_name(step.qp_status),
                    step.active_constraints.len(),
                    step.active_constraints.join(";")
                )),
                None => out.push_str(",,0,\n"),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> ForPolygon {
        ForPolygon::from_vertices(vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])
    }

    #[test]
    fn single_state_projection() {
        let t = Trajectory::from_points(&[(0.1, -0.2)], &[0]);
        assert_eq!(t.project().points, vec![Some((0.1, -0.2))]);
    }

    #[test]
    fn textbook_classes() {
        let f = square();
        let safe = TrajectorySet::new(vec![Trajectory::from_points(&[(0.0, 0.0); 3], &[2])]);
        assert_eq!(classify(&safe, &f, 1e-3).class, SafetyClass::Safe);

        let excursion = TrajectorySet::new(vec![Trajectory::from_points(&[(0.0, 0.0), (1.5, 0.0), (0.5, 0.5)], &[2])]);
        let v = classify(&excursion, &f, 1e-3);
        assert_eq!(v.class, SafetyClass::ConditionallySafe);
        assert_eq!(v.witnesses.len(), 1);
        assert_eq!(v.witnesses[0].k, 1);

        let r = f.radius();
        let off = TrajectorySet::new(vec![Trajectory::from_points(&[(0.0, 0.0), (2.0 * r, 0.0)], &[1])]);
        let v = classify(&off, &f, 1e-3);
        assert_eq!(v.class, SafetyClass::Unsafe);
        assert!(v.final_witnesses().all(|w| !f.contains(w.point, 1e-3)));
    }

    #[test]
    fn robustness_needs_evidence() {
        assert_eq!(robustness_verdict(&[], 1e-3), Err(AnalysisError::NoEvidence));
        let f = square();
        let safe = TrajectorySet::new(vec![Trajectory::from_points(&[(0.0, 0.0)], &[0])]);
        let cond = TrajectorySet::new(vec![Trajectory::from_points(&[(3.0, 0.0), (0.0, 0.0)], &[1])]);
        assert!(robustness_verdict(&[(safe.clone(), f.clone())], 1e-3).unwrap().robust);
        let report = robustness_verdict(&[(safe, f.clone()), (cond, f)], 1e-3).unwrap();
        assert!(!report.robust);
        assert_eq!(report.offenders().map(|e| e.set).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn coverage_endpoints() {
        let f = square();
        let corners = f.vertices.clone();
        let set =
            TrajectorySet::new(corners.iter().map(|&c| Trajectory::from_points(&[(0.0, 0.0), c], &[1])).collect());
        let c0 = coverage_metric(&set, &f, 0);
        assert!(c0.degenerate);
        assert_eq!(c0.fraction, 0.0);
        assert!((coverage_metric(&set, &f, 1).fraction - 1.0).abs() < 1e-12);
        assert!((coverage_metric(&set, &f, 50).fraction - 1.0).abs() < 1e-12);
    }
}
