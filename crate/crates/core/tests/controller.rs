use ofo_safety::controller::{
    cost, ofo_step, run_schedule, ControlError, ControllerConfig, GridLimits, NoDisturbance, SetPoint,
};
use ofo_safety::grid::{ControlVector, GridModel};
use ofo_safety::power_flow::solve_power_flow;
use ofo_safety::qp::QpStatus;
use ofo_safety::sensitivity::{compute_sensitivity, SensitivityMap};

mod common;
use common::fixture;

const ALPHA: f64 = 0.11294;

fn ring() -> (GridModel, ControlVector, SensitivityMap, (f64, f64)) {
    let g = fixture("four_bus_ring.json");
    let u0 = g.control_vector();
    let map = compute_sensitivity(&g, &u0).unwrap();
    let pcc = solve_power_flow(&g, None).unwrap().pcc();
    (g, u0, map, pcc)
}

fn within_bounds(g: &GridModel, u: &ControlVector) -> bool {
    let (lo, hi) = g.control_bounds();
    u.0.iter().zip(lo.iter().zip(&hi)).all(|(x, (l, h))| *l <= *x && *x <= *h)
}

#[test]
fn tracks_a_reachable_target_with_descent() {
    let (g, u0, map, (p0, q0)) = ring();
    let target = SetPoint::new(p0 - 0.1, q0 + 0.05);
    let traj = run_schedule(&g, &u0, &map, &[target], &ControllerConfig::new(ALPHA), &NoDisturbance).unwrap();
    assert!(traj.converged());
    assert!(traj.final_error().unwrap() <= 1e-3);
    let phi: Vec<f64> = traj.states.iter().map(|s| cost(s.pcc(), target)).collect();
    assert!(phi.windows(2).all(|w| w[1] <= w[0] + 1e-14), "{phi:?}");
    assert!(traj.steps.iter().all(|s| s.qp_status == QpStatus::Optimal));
    assert_eq!(traj.states.len(), traj.controls.len());
    assert_eq!(traj.steps.len() + 1, traj.states.len());
}

#[test]
fn holds_at_the_boundary_of_an_unreachable_target() {
    let (g, u0, map, (p0, q0)) = ring();
    let target = SetPoint::new(p0 - 5.0, q0);
    let cfg = ControllerConfig { max_iterations: 150, ..ControllerConfig::new(ALPHA) };
    let traj = run_schedule(&g, &u0, &map, &[target], &cfg, &NoDisturbance).unwrap();
    assert!(!traj.converged());
    assert!(traj.abort.is_none());
    assert_eq!(traj.steps.len(), 150);
    let limits = GridLimits::of(&g);
    let last = traj.states.last().unwrap();
    assert!(limits.violation(last) < 1e-3, "violation {}", limits.violation(last));
    // pushed as far as the units allow: both p at their upper bound or a grid limit active
    let tail = &traj.steps[140..];
    assert!(tail.iter().all(|s| !s.active_constraints.is_empty()));
    let moves: f64 = traj.controls[140..].windows(2).map(|w| (w[1].0[0] - w[0].0[0]).abs()).sum();
    assert!(moves < 1e-3, "still moving {moves}");
}

#[test]
fn inputs_never_leave_their_bounds() {
    let (g, u0, map, (p0, q0)) = ring();
    let schedule = [SetPoint::new(p0 + 3.0, q0 + 3.0), SetPoint::new(p0 - 3.0, q0 - 3.0)];
    let cfg = ControllerConfig { max_iterations: 60, ..ControllerConfig::new(0.5) };
    let traj = run_schedule(&g, &u0, &map, &schedule, &cfg, &NoDisturbance).unwrap();
    assert!(traj.controls.iter().all(|u| within_bounds(&g, u)));
    assert_eq!(traj.segments.len(), 2);
    assert_eq!(traj.segments[1].start, traj.segments[0].final_index);
}

#[test]
fn schedule_segments_chain() {
    let (g, u0, map, (p0, q0)) = ring();
    let schedule = [SetPoint::new(p0 - 0.05, q0), SetPoint::new(p0 - 0.05, q0 + 0.05), SetPoint::new(p0, q0)];
    let traj = run_schedule(&g, &u0, &map, &schedule, &ControllerConfig::new(ALPHA), &NoDisturbance).unwrap();
    assert!(traj.converged());
    let mut start = 0;
    for (seg, target) in traj.segments.iter().zip(&schedule) {
        assert_eq!(seg.start, start);
        assert_eq!(seg.target, *target);
        assert!(target.distance(traj.states[seg.final_index].pcc()) <= 1e-3);
        start = seg.final_index;
    }
    assert_eq!(traj.k_f(), traj.states.len() - 1);
}

#[test]
fn a_target_already_met_costs_no_steps() {
    let (g, u0, map, (p0, q0)) = ring();
    let traj =
        run_schedule(&g, &u0, &map, &[SetPoint::new(p0, q0)], &ControllerConfig::new(ALPHA), &NoDisturbance).unwrap();
    assert!(traj.steps.is_empty());
    assert_eq!(traj.k_f(), 0);
}

#[test]
fn single_step_moves_against_the_gradient() {
    let (g, u0, map, (p0, q0)) = ring();
    let target = SetPoint::new(p0 - 0.1, q0);
    let step = ofo_step(&g, &u0, &map, target, &ControllerConfig::new(ALPHA), None).unwrap();
    assert!((step.phi - 0.01).abs() < 1e-12);
    // less import requires more generation
    assert!(step.u_next.0[0] > u0.0[0] && step.u_next.0[1] > u0.0[1]);
}

#[test]
fn rejects_bad_inputs() {
    let (g, u0, map, _) = ring();
    let cfg = ControllerConfig::new(ALPHA);
    assert!(matches!(run_schedule(&g, &u0, &map, &[], &cfg, &NoDisturbance), Err(ControlError::EmptySchedule)));
    let bad = ControllerConfig::new(-1.0);
    assert!(matches!(
        run_schedule(&g, &u0, &map, &[SetPoint::new(0.0, 0.0)], &bad, &NoDisturbance),
        Err(ControlError::Config(_))
    ));
    let wrong = ControlVector(vec![0.0; 2]);
    assert!(run_schedule(&g, &wrong, &map, &[SetPoint::new(0.0, 0.0)], &cfg, &NoDisturbance).is_err());
}
