//! Builds the 30-bus synthetic sub-transmission fixture and writes it as JSON.
//!
//! cargo run --example synthetic_grid -- fixtures/synthetic_30.json

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ofo_safety::grid::{save_grid, validate, Branch, Bus, BusType, FixedLoad, FlexUnit, GridModel, LoadClass};
use ofo_safety::power_flow::solve_power_flow;

const N_BUSES: usize = 30;
const SEED: u64 = 30;

fn bus(id: String, kind: BusType, v_kv: f64) -> Bus {
    let (v_min, v_max) = if kind == BusType::Slack { (0.9, 1.1) } else { (0.95, 1.06) };
    Bus { id, kind, v_kv, v_min, v_max, v_set: if kind == BusType::Slack { 1.02 } else { 1.0 } }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_30.json".into());
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let s_base = 100.0;

    let mut buses = vec![bus("hv".into(), BusType::Slack, 110.0)];
    for i in 1..N_BUSES {
        buses.push(bus(format!("b{i}"), BusType::Pq, 20.0));
    }

    let mut branches = vec![Branch {
        id: "tr".into(),
        from: "hv".into(),
        to: "b1".into(),
        r: 0.002,
        x: 0.04,
        b: 0.0,
        tap: 1.0,
        s_max: Some(0.9),
    }];
    // four radial feeders from b1, each a chain of seven buses
    let feeders: Vec<Vec<usize>> =
        (0..4).map(|f| (0..7).map(|j| 2 + f * 7 + j).filter(|&b| b < N_BUSES).collect()).collect();
    for feeder in &feeders {
        let mut prev = 1;
        for &b in feeder {
            let len = rng.random_range(0.6..1.4);
            branches.push(Branch {
                id: format!("l{prev}_{b}"),
                from: format!("b{prev}"),
                to: format!("b{b}"),
                r: 0.008 * len,
                x: 0.016 * len,
                b: 0.0005 * len,
                tap: 1.0,
                s_max: if prev == 1 { Some(0.3) } else { None },
            });
            prev = b;
        }
    }
    // two normally closed ties between feeder ends
    for (a, b) in [(feeders[0][6], feeders[1][6]), (feeders[2][6], feeders[3].last().copied().unwrap())] {
        branches.push(Branch {
            id: format!("tie{a}_{b}"),
            from: format!("b{a}"),
            to: format!("b{b}"),
            r: 0.012,
            x: 0.024,
            b: 0.0005,
            tap: 1.0,
            s_max: Some(0.15),
        });
    }

    let classes = LoadClass::ALL;
    let mut fixed_loads = Vec::new();
    for i in 2..N_BUSES {
        let p = rng.random_range(1.0..4.0) / s_base;
        fixed_loads.push(FixedLoad {
            id: format!("d{i}"),
            bus: format!("b{i}"),
            p,
            q: p * rng.random_range(0.15..0.35),
            class: classes[i % 3],
        });
    }

    // flexible units near the feeder ends plus one non-controllable unit
    let mut flex_units = Vec::new();
    for (k, feeder) in feeders.iter().enumerate() {
        for &pos in &[3usize, 6] {
            let Some(&b) = feeder.get(pos) else { continue };
            let size = rng.random_range(8.0..15.0) / s_base;
            flex_units.push(FlexUnit {
                id: format!("g{b}"),
                bus: format!("b{b}"),
                p_min: -0.5 * size,
                p_max: size,
                q_min: -0.6 * size,
                q_max: 0.6 * size,
                p: 0.25 * size,
                q: 0.0,
                controllable: !(k == 3 && pos == 3),
            });
        }
    }

    let grid = GridModel { s_base, buses, branches, flex_units, fixed_loads, pcc: "tr".into() };
    let report = validate(&grid);
    if !report.is_empty() {
        return Err(format!("generated grid is invalid: {:?}", report.findings).into());
    }
    let state = solve_power_flow(&grid, None)?;
    println!(
        "{} buses, {} branches, {} units; PCC flow ({:.4}, {:.4}) p.u. after {} iterations",
        grid.buses.len(),
        grid.branches.len(),
        grid.flex_units.len(),
        state.p_pcc,
        state.q_pcc,
        state.iterations
    );
    save_grid(&grid, &out)?;
    println!("wrote {out}");
    Ok(())
}
