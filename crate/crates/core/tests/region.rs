use ofo_safety::controller::GridLimits;
use ofo_safety::grid::{apply_control, ControlVector};
use ofo_safety::power_flow::solve_power_flow;
use ofo_safety::region::{sweep_for, RegionError, SweepOptions};

mod common;
use common::{complex_residual, feasible_cloud, fixture, inside};

#[test]
fn sampled_flows_lie_inside_the_ring_region() {
    let g = fixture("four_bus_ring.json");
    let f = sweep_for(&g, &SweepOptions::with_angles(72)).unwrap();
    assert_eq!(f.vertices.len(), 72);
    assert!(f.failures.is_empty());
    assert!(f.is_simple());
    let cloud = feasible_cloud(&g, 5000, 99);
    assert!(cloud.len() > 1000);
    let hits = cloud.iter().filter(|&&p| inside(&f.vertices, p, 1e-3)).count();
    let share = hits as f64 / cloud.len() as f64;
    assert!(share >= 0.99, "containment {share}");
}

#[test]
fn vertices_resimulate() {
    for name in ["two_bus.json", "four_bus_ring.json"] {
        let g = fixture(name);
        let f = sweep_for(&g, &SweepOptions::with_angles(36)).unwrap();
        let limits = GridLimits::of(&g);
        for (v, u) in f.vertices.iter().zip(&f.controls) {
            let (applied, clips) = apply_control(&g, &ControlVector(u.clone())).unwrap();
            assert!(clips.is_empty());
            let s = solve_power_flow(&applied, None).unwrap();
            assert!(complex_residual(&applied, &s) < 1e-8);
            let (p, q) = s.pcc();
            assert!((p - v.0).hypot(q - v.1) <= 1e-4, "{name}: vertex {v:?} re-solves to {:?}", (p, q));
            assert!(limits.violation(&s) <= 1e-6, "{name}: violation {}", limits.violation(&s));
        }
    }
}

#[test]
fn stiff_single_unit_gives_its_box() {
    // nearly lossless short tie: the region is the unit box mirrored through the origin
    let g = fixture("box_unit.json");
    let f = sweep_for(&g, &SweepOptions::with_angles(8)).unwrap();
    assert!((f.area() - 0.16).abs() < 0.16 * 0.01, "area {}", f.area());
    for corner in [(0.2, 0.2), (-0.2, 0.2), (-0.2, -0.2), (0.2, -0.2)] {
        let d = f.vertices.iter().map(|v| (v.0 - corner.0).hypot(v.1 - corner.1)).fold(f64::INFINITY, f64::min);
        assert!(d < 1e-3, "corner {corner:?} missed by {d}");
    }
    assert!(f.binding.iter().all(|b| !b.is_empty()));
}

#[test]
fn vertices_follow_sweep_angles() {
    let g = fixture("four_bus_ring.json");
    let f = sweep_for(&g, &SweepOptions::with_angles(24)).unwrap();
    for (i, (v, a)) in f.vertices.iter().zip(&f.angles).enumerate() {
        let expected = i as f64 * std::f64::consts::TAU / 24.0;
        assert!((a - expected).abs() < 1e-12);
        let (dp, dq) = (v.0 - f.center.0, v.1 - f.center.1);
        // on the ray through the center
        assert!((dp * a.sin() - dq * a.cos()).abs() < 1e-6, "vertex {i} off its ray");
        assert!(dp * a.cos() + dq * a.sin() > 0.0);
    }
    let csv = f.to_csv();
    assert_eq!(csv.lines().count(), 25);
    assert!(csv.starts_with("theta_deg,p_pcc,q_pcc,binding_constraints\n"));
}

#[test]
fn too_few_angles_is_an_error() {
    let g = fixture("two_bus.json");
    for n in [0, 2, 3] {
        assert!(matches!(sweep_for(&g, &SweepOptions::with_angles(n)), Err(RegionError::TooFewAngles(m)) if m == n));
    }
    assert!(sweep_for(&g, &SweepOptions::with_angles(4)).is_ok());
}
