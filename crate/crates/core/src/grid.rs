//! Static grid data: buses, branches, flexible units and fixed loads.
//!
//! Files are JSON in engineering units (MW, MVAr, MVA, kV). Everything in
//! [`GridModel`] is per-unit on `s_base`. The field list is documented in
//! `schemas/grid.schema.json`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default voltage band half-width (p.u.) when a bus omits its limits.
pub const DEFAULT_VOLTAGE_BAND: f64 = 0.10;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read grid file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed grid file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid grid: {0}")]
    Invalid(Violation),
    #[error("control vector has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    Slack,
    Pq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadClass {
    Household,
    Industry,
    Commercial,
}

impl LoadClass {
    pub const ALL: [LoadClass; 3] = [LoadClass::Household, LoadClass::Industry, LoadClass::Commercial];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub kind: BusType,
    pub v_kv: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage magnitude held at the slack bus; ignored elsewhere.
    pub v_set: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance, split evenly between both ends.
    pub b: f64,
    /// Off-nominal turns ratio on the `from` side.
    pub tap: f64,
    /// Apparent-power limit; `None` leaves the branch unconstrained.
    pub s_max: Option<f64>,
}

/// A unit with adjustable injection. Positive `p`/`q` feed into the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexUnit {
    pub id: String,
    pub bus: String,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub p: f64,
    pub q: f64,
    pub controllable: bool,
}

/// Consumption that the controller cannot move. Positive `p`/`q` are drawn from the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLoad {
    pub id: String,
    pub bus: String,
    pub p: f64,
    pub q: f64,
    pub class: LoadClass,
}

/// Per-unit network model. Immutable in normal use; [`apply_control`] and the
/// load-noise sampler return modified copies.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub s_base: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub flex_units: Vec<FlexUnit>,
    pub fixed_loads: Vec<FixedLoad>,
    /// Branch coupling this grid to the superimposed layer. Its `from` end
    /// faces the superimposed grid.
    pub pcc: String,
}

/// Set points of the controllable units, laid out as `[p_1..p_j, q_1..q_j]`
/// in the order the units appear in the grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(pub Vec<f64>);

impl ControlVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEvent {
    pub unit: String,
    pub channel: PowerChannel,
    pub requested: f64,
    pub applied: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerChannel {
    P,
    Q,
}

/// One broken invariant, naming the offending element.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveBase(f64),
    NoSlack,
    MultipleSlack(Vec<String>),
    DuplicateBus(String),
    DuplicateBranch(String),
    VoltageBand { bus: String, v_min: f64, v_max: f64 },
    UnknownBus { element: String, bus: String },
    SelfLoop(String),
    NegativeResistance(String),
    ZeroImpedance(String),
    NonPositiveTap(String),
    NonPositiveFlowLimit(String),
    UnknownPcc(String),
    UnitBounds(String),
    Disconnected(Vec<String>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveBase(s) => write!(f, "s_base must be positive, got {s}"),
            Violation::NoSlack => write!(f, "no slack bus"),
            Violation::MultipleSlack(ids) => write!(f, "multiple slack buses: {}", ids.join(", ")),
            Violation::DuplicateBus(id) => write!(f, "duplicate bus id {id}"),
            Violation::DuplicateBranch(id) => write!(f, "duplicate branch id {id}"),
            Violation::VoltageBand { bus, v_min, v_max } => {
                write!(f, "bus {bus}: v_min {v_min} must be below v_max {v_max}")
            }
            Violation::UnknownBus { element, bus } => {
                write!(f, "{element} references nonexistent bus {bus}")
            }
            Violation::SelfLoop(id) => write!(f, "branch {id} connects a bus to itself"),
            Violation::NegativeResistance(id) => write!(f, "branch {id} has negative resistance"),
            Violation::ZeroImpedance(id) => write!(f, "branch {id} has zero impedance"),
            Violation::NonPositiveTap(id) => write!(f, "branch {id} has non-positive tap ratio"),
            Violation::NonPositiveFlowLimit(id) => write!(f, "branch {id} has non-positive s_max"),
            Violation::UnknownPcc(id) => write!(f, "pcc branch {id} does not exist"),
            Violation::UnitBounds(id) => write!(f, "flex unit {id} has min above max"),
            Violation::Disconnected(ids) => {
                write!(f, "disconnected graph: buses {} unreachable from slack", ids.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl GridModel {
    pub fn bus_index(&self) -> HashMap<&str, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect()
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusType::Slack)
    }

    pub fn pcc_index(&self) -> Option<usize> {
        self.branches.iter().position(|b| b.id == self.pcc)
    }

    pub fn controllable_units(&self) -> impl Iterator<Item = &FlexUnit> {
        self.flex_units.iter().filter(|u| u.controllable)
    }

    pub fn n_controllable(&self) -> usize {
        self.controllable_units().count()
    }

    /// Current set points of the controllable units.
    pub fn control_vector(&self) -> ControlVector {
        let units: Vec<_> = self.controllable_units().collect();
        let mut u: Vec<f64> = units.iter().map(|f| f.p).collect();
        u.extend(units.iter().map(|f| f.q));
        ControlVector(u)
    }

    /// Lower and upper input bounds in control-vector layout.
    pub fn control_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let units: Vec<_> = self.controllable_units().collect();
        let mut lo: Vec<f64> = units.iter().map(|f| f.p_min).collect();
        lo.extend(units.iter().map(|f| f.q_min));
        let mut hi: Vec<f64> = units.iter().map(|f| f.p_max).collect();
        hi.extend(units.iter().map(|f| f.q_max));
        (lo, hi)
    }

    /// Labels of the control-vector entries (`p:<unit>`, `q:<unit>`).
    pub fn control_labels(&self) -> Vec<String> {
        let units: Vec<_> = self.controllable_units().collect();
        let mut labels: Vec<String> = units.iter().map(|f| format!("p:{}", f.id)).collect();
        labels.extend(units.iter().map(|f| format!("q:{}", f.id)));
        labels
    }

    /// Net specified injection per bus (units minus loads), in bus order.
    pub fn bus_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let index = self.bus_index();
        let mut p = vec![0.0; self.buses.len()];
        let mut q = vec![0.0; self.buses.len()];
        for unit in &self.flex_units {
            if let Some(&i) = index.get(unit.bus.as_str()) {
                p[i] += unit.p;
                q[i] += unit.q;
            }
        }
        for load in &self.fixed_loads {
            if let Some(&i) = index.get(load.bus.as_str()) {
                p[i] -= load.p;
                q[i] -= load.q;
            }
        }
        (p, q)
    }
}

/// Checks every invariant and lists all violations.
pub fn validate(grid: &GridModel) -> ValidationReport {
    let mut findings = Vec::new();
    if !(grid.s_base > 0.0) {
        findings.push(Violation::NonPositiveBase(grid.s_base));
    }

    let mut seen = HashSet::new();
    for bus in &grid.buses {
        if !seen.insert(bus.id.as_str()) {
            findings.push(Violation::DuplicateBus(bus.id.clone()));
        }
    }
    let slacks: Vec<String> = grid.buses.iter().filter(|b| b.kind == BusType::Slack).map(|b| b.id.clone()).collect();
    match slacks.len() {
        0 => findings.push(Violation::NoSlack),
        1 => {}
        _ => findings.push(Violation::MultipleSlack(slacks)),
    }
    for bus in &grid.buses {
        if !(bus.v_min < bus.v_max) {
            findings.push(Violation::VoltageBand { bus: bus.id.clone(), v_min: bus.v_min, v_max: bus.v_max });
        }
    }

    let index = grid.bus_index();
    let mut seen = HashSet::new();
    for br in &grid.branches {
        if !seen.insert(br.id.as_str()) {
            findings.push(Violation::DuplicateBranch(br.id.clone()));
        }
        for end in [&br.from, &br.to] {
            if !index.contains_key(end.as_str()) {
                findings.push(Violation::UnknownBus { element: format!("branch {}", br.id), bus: end.clone() });
            }
        }
        if br.from == br.to {
            findings.push(Violation::SelfLoop(br.id.clone()));
        }
        if br.r < 0.0 {
            findings.push(Violation::NegativeResistance(br.id.clone()));
        }
        if br.r == 0.0 && br.x == 0.0 {
            findings.push(Violation::ZeroImpedance(br.id.clone()));
        }
        if !(br.tap > 0.0) {
            findings.push(Violation::NonPositiveTap(br.id.clone()));
        }
        if let Some(s) = br.s_max {
            if !(s > 0.0) {
                findings.push(Violation::NonPositiveFlowLimit(br.id.clone()));
            }
        }
    }
    if grid.pcc_index().is_none() {
        findings.push(Violation::UnknownPcc(grid.pcc.clone()));
    }

    for unit in &grid.flex_units {
        if !index.contains_key(unit.bus.as_str()) {
            findings.push(Violation::UnknownBus { element: format!("flex unit {}", unit.id), bus: unit.bus.clone() });
        }
        if unit.p_min > unit.p_max || unit.q_min > unit.q_max {
            findings.push(Violation::UnitBounds(unit.id.clone()));
        }
    }
    for load in &grid.fixed_loads {
        if !index.contains_key(load.bus.as_str()) {
            findings.push(Violation::UnknownBus { element: format!("load {}", load.id), bus: load.bus.clone() });
        }
    }

    if let Some(root) = grid.slack_index() {
        let mut adjacency = vec![Vec::new(); grid.buses.len()];
        for br in &grid.branches {
            if let (Some(&f), Some(&t)) = (index.get(br.from.as_str()), index.get(br.to.as_str())) {
                adjacency[f].push(t);
                adjacency[t].push(f);
            }
        }
        let mut reached = vec![false; grid.buses.len()];
        let mut queue = VecDeque::from([root]);
        reached[root] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adjacency[i] {
                if !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let unreachable: Vec<String> =
            grid.buses.iter().zip(&reached).filter(|(_, &r)| !r).map(|(b, _)| b.id.clone()).collect();
        if !unreachable.is_empty() {
            findings.push(Violation::Disconnected(unreachable));
        }
    }

    ValidationReport { findings }
}

/// Sets the controllable-unit injections to `u`, clipping each entry to its
/// unit bounds. Clips are reported, not rejected.
pub fn apply_control(grid: &GridModel, u: &ControlVector) -> Result<(GridModel, Vec<ClipEvent>), GridError> {
    let j = grid.n_controllable();
    if u.len() != 2 * j {
        return Err(GridError::Dimension { expected: 2 * j, got: u.len() });
    }
    let mut out = grid.clone();
    let mut clips = Vec::new();
    for (slot, unit) in out.flex_units.iter_mut().filter(|f| f.controllable).enumerate() {
        let requested = [(PowerChannel::P, u.0[slot]), (PowerChannel::Q, u.0[j + slot])];
        for (channel, value) in requested {
            let (lo, hi) = match channel {
                PowerChannel::P => (unit.p_min, unit.p_max),
                PowerChannel::Q => (unit.q_min, unit.q_max),
            };
            let applied = value.clamp(lo, hi);
            if applied != value {
                clips.push(ClipEvent { unit: unit.id.clone(), channel, requested: value, applied });
            }
            match channel {
                PowerChannel::P => unit.p = applied,
                PowerChannel::Q => unit.q = applied,
            }
        }
    }
    Ok((out, clips))
}

// ---------------------------------------------------------------------------
// File format

fn default_tap() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: BusType,
    pub v_kv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_min_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set_pu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r_pu: f64,
    pub x_pu: f64,
    #[serde(default)]
    pub b_pu: f64,
    #[serde(default = "default_tap")]
    pub tap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max_mva: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexUnitRecord {
    pub id: String,
    pub bus: String,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    pub q_min_mvar: f64,
    pub q_max_mvar: f64,
    #[serde(default)]
    pub p_mw: f64,
    #[serde(default)]
    pub q_mvar: f64,
    #[serde(default = "default_true")]
    pub controllable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRecord {
    pub id: String,
    pub bus: String,
    pub p_mw: f64,
    pub q_mvar: f64,
    pub class: LoadClass,
}

/// On-disk grid document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub s_base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    #[serde(default)]
    pub flex_units: Vec<FlexUnitRecord>,
    #[serde(default)]
    pub loads: Vec<LoadRecord>,
    pub pcc_branch: String,
}

impl GridFile {
    /// Converts to per-unit without validating.
    pub fn to_model(&self) -> GridModel {
        let s = self.s_base_mva;
        GridModel {
            s_base: s,
            buses: self
                .buses
                .iter()
                .map(|b| Bus {
                    id: b.id.clone(),
                    kind: b.kind,
                    v_kv: b.v_kv,
                    v_min: b.v_min_pu.unwrap_or(1.0 - DEFAULT_VOLTAGE_BAND),
                    v_max: b.v_max_pu.unwrap_or(1.0 + DEFAULT_VOLTAGE_BAND),
                    v_set: b.v_set_pu.unwrap_or(1.0),
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    id: b.id.clone(),
                    from: b.from.clone(),
                    to: b.to.clone(),
                    r: b.r_pu,
                    x: b.x_pu,
                    b: b.b_pu,
                    tap: b.tap,
                    s_max: b.s_max_mva.map(|v| v / s),
                })
                .collect(),
            flex_units: self
                .flex_units
                .iter()
                .map(|f| FlexUnit {
                    id: f.id.clone(),
                    bus: f.bus.clone(),
                    p_min: f.p_min_mw / s,
                    p_max: f.p_max_mw / s,
                    q_min: f.q_min_mvar / s,
                    q_max: f.q_max_mvar / s,
                    p: f.p_mw / s,
                    q: f.q_mvar / s,
                    controllable: f.controllable,
                })
                .collect(),
            fixed_loads: self
                .loads
                .iter()
                .map(|l| FixedLoad {
                    id: l.id.clone(),
                    bus: l.bus.clone(),
                    p: l.p_mw / s,
                    q: l.q_mvar / s,
                    class: l.class,
                })
                .collect(),
            pcc: self.pcc_branch.clone(),
        }
    }

    pub fn from_model(grid: &GridModel) -> Self {
        let s = grid.s_base;
        GridFile {
            s_base_mva: s,
            buses: grid
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id.clone(),
                    kind: b.kind,
                    v_kv: b.v_kv,
                    v_min_pu: Some(b.v_min),
                    v_max_pu: Some(b.v_max),
                    v_set_pu: Some(b.v_set),
                })
                .collect(),
            branches: grid
                .branches
                .iter()
                .map(|b| BranchRecord {
                    id: b.id.clone(),
                    from: b.from.clone(),
                    to: b.to.clone(),
                    r_pu: b.r,
                    x_pu: b.x,
                    b_pu: b.b,
                    tap: b.tap,
                    s_max_mva: b.s_max.map(|v| v * s),
                })
                .collect(),
            flex_units: grid
                .flex_units
                .iter()
                .map(|f| FlexUnitRecord {
                    id: f.id.clone(),
                    bus: f.bus.clone(),
                    p_min_mw: f.p_min * s,
                    p_max_mw: f.p_max * s,
                    q_min_mvar: f.q_min * s,
                    q_max_mvar: f.q_max * s,
                    p_mw: f.p * s,
                    q_mvar: f.q * s,
                    controllable: f.controllable,
                })
                .collect(),
            loads: grid
                .fixed_loads
                .iter()
                .map(|l| LoadRecord {
                    id: l.id.clone(),
                    bus: l.bus.clone(),
                    p_mw: l.p * s,
                    q_mvar: l.q * s,
                    class: l.class,
                })
                .collect(),
            pcc_branch: grid.pcc.clone(),
        }
    }
}

/// Parses and validates a grid document held in memory.
pub fn parse_grid(text: &str) -> Result<GridModel, GridError> {
    let file: GridFile = serde_json::from_str(text)?;
    let grid = file.to_model();
    match validate(&grid).findings.into_iter().next() {
        Some(first) => Err(GridError::Invalid(first)),
        None => Ok(grid),
    }
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<GridModel, GridError> {
    parse_grid(&std::fs::read_to_string(path)?)
}

pub fn grid_to_json(grid: &GridModel) -> String {
    serde_json::to_string_pretty(&GridFile::from_model(grid)).expect("grid serializes")
}

pub fn save_grid(grid: &GridModel, path: impl AsRef<Path>) -> Result<(), GridError> {
    std::fs::write(path, grid_to_json(grid))?;
    Ok(())
}
