//! Multi-phase network description and nodal admittance assembly.
//!
//! A [`Network`] is a set of buses connected by branches. Each branch carries a
//! dense phase-coupling block (`P x P` complex, per-unit) so the balanced
//! single-phase case (`P = 1`) and the unbalanced three-phase case share one
//! code path. Bus-phase pairs are numbered in bus order, then phase order; that
//! numbering is the row/column order of the admittance matrix and of every
//! state vector in this crate.

mod file;

pub use file::{load_network, network_from_json, network_to_json, save_network};

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that coupling blocks are reciprocal.
const RECIPROCITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("no slack bus")]
    MissingSlack,
    #[error("multiple slack buses ({0:?})")]
    MultipleSlack(Vec<u32>),
    #[error("network is disconnected: bus {0} is not reachable from the slack")]
    Disconnected(u32),
    #[error("branch {branch} references unknown bus {bus}")]
    UnknownBus { branch: usize, bus: u32 },
    #[error("branch {0} connects a bus to itself")]
    SelfLoop(usize),
    #[error("branch {branch}: {what}")]
    BlockShape { branch: usize, what: String },
    #[error("bus {0}: {1}")]
    InvalidBus(u32, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GridError {
    /// Stable short code for each error class.
    pub fn code(&self) -> &'static str {
        match self {
            GridError::Schema(_) => "schema",
            GridError::DuplicateBus(_) => "duplicate-id",
            GridError::MissingSlack => "missing-slack",
            GridError::MultipleSlack(_) => "multiple-slack",
            GridError::Disconnected(_) => "disconnected",
            GridError::UnknownBus { .. } => "unknown-bus",
            GridError::SelfLoop(_) => "self-loop",
            GridError::BlockShape { .. } => "block-shape",
            GridError::InvalidBus(..) => "invalid-bus",
            GridError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PQ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    /// Ordered subset of `{1, 2, 3}`.
    pub phases: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    /// Series coupling block; entry `(k, l)` couples phase `k` of one end to phase `l` of the other.
    pub series: DMatrix<Complex64>,
    pub shunt_from: Option<DMatrix<Complex64>>,
    pub shunt_to: Option<DMatrix<Complex64>>,
}

impl Branch {
    pub fn new(from: u32, to: u32, series: DMatrix<Complex64>) -> Self {
        Self {
            from,
            to,
            series,
            shunt_from: None,
            shunt_to: None,
        }
    }

    /// Single-phase branch with scalar series admittance.
    pub fn single(from: u32, to: u32, y: Complex64) -> Self {
        Self::new(from, to, DMatrix::from_element(1, 1, y))
    }

    pub fn has_shunt(&self) -> bool {
        self.shunt_from.is_some() || self.shunt_to.is_some()
    }
}

/// Reference angle of a phase at the slack bus (radians).
pub fn reference_angle(phase: u8) -> f64 {
    match phase {
        2 => -2.0 * PI / 3.0,
        3 => 2.0 * PI / 3.0,
        _ => 0.0,
    }
}

/// One (bus, phase) pair of the state numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BusPhase {
    pub bus: u32,
    pub phase: u8,
}

/// Validated network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    phase_count: u8,
    base_power_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    // derived
    bus_offset: Vec<usize>,
    bus_position: HashMap<u32, usize>,
    slack: usize,
}

impl Network {
    pub fn new(
        phase_count: u8,
        base_power_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
    ) -> Result<Self, GridError> {
        if phase_count != 1 && phase_count != 3 {
            return Err(GridError::Schema(format!(
                "phase_count must be 1 or 3, got {phase_count}"
            )));
        }
        if !(base_power_mva.is_finite() && base_power_mva > 0.0) {
            return Err(GridError::Schema("base_power_mva must be positive".into()));
        }
        if buses.is_empty() {
            return Err(GridError::Schema("network has no buses".into()));
        }

        let mut bus_position = HashMap::with_capacity(buses.len());
        let mut bus_offset = Vec::with_capacity(buses.len());
        let mut offset = 0;
        for (pos, bus) in buses.iter().enumerate() {
            if bus.id == 0 {
                return Err(GridError::InvalidBus(bus.id, "bus ids start at 1".into()));
            }
            if bus_position.insert(bus.id, pos).is_some() {
                return Err(GridError::DuplicateBus(bus.id));
            }
            if bus.phases.is_empty() {
                return Err(GridError::InvalidBus(bus.id, "empty phase set".into()));
            }
            let ordered = bus.phases.windows(2).all(|w| w[0] < w[1]);
            let in_range = bus.phases.iter().all(|&p| p >= 1 && p <= phase_count);
            if !ordered || !in_range {
                return Err(GridError::InvalidBus(
                    bus.id,
                    format!("phases {:?} are not an ordered subset of 1..={phase_count}", bus.phases),
                ));
            }
            bus_offset.push(offset);
            offset += bus.phases.len();
        }

        let slacks: Vec<u32> = buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        let slack = match slacks.len() {
            0 => return Err(GridError::MissingSlack),
            1 => bus_position[&slacks[0]],
            _ => return Err(GridError::MultipleSlack(slacks)),
        };

        for (idx, br) in branches.iter().enumerate() {
            for bus in [br.from, br.to] {
                if !bus_position.contains_key(&bus) {
                    return Err(GridError::UnknownBus { branch: idx, bus });
                }
            }
            if br.from == br.to {
                return Err(GridError::SelfLoop(idx));
            }
            let pf = &buses[bus_position[&br.from]].phases;
            let pt = &buses[bus_position[&br.to]].phases;
            if pf != pt {
                return Err(GridError::BlockShape {
                    branch: idx,
                    what: format!("endpoint phase sets differ ({pf:?} vs {pt:?})"),
                });
            }
            let n = pf.len();
            check_block(idx, "series", &br.series, n)?;
            if let Some(s) = &br.shunt_from {
                check_block(idx, "shunt_from", s, n)?;
            }
            if let Some(s) = &br.shunt_to {
                check_block(idx, "shunt_to", s, n)?;
            }
        }

        let net = Self {
            phase_count,
            base_power_mva,
            buses,
            branches,
            bus_offset,
            bus_position,
            slack,
        };
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<(), GridError> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.buses.len()];
        for br in &self.branches {
            let a = self.bus_position[&br.from];
            let b = self.bus_position[&br.to];
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(pos) => Err(GridError::Disconnected(self.buses[pos].id)),
            None => Ok(()),
        }
    }

    pub fn phase_count(&self) -> u8 {
        self.phase_count
    }

    pub fn base_power_mva(&self) -> f64 {
        self.base_power_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn bus(&self, id: u32) -> Option<&Bus> {
        self.bus_position.get(&id).map(|&p| &self.buses[p])
    }

    pub fn slack_bus(&self) -> &Bus {
        &self.buses[self.slack]
    }

    /// Total number of bus-phase pairs (state phases).
    pub fn bus_phase_count(&self) -> usize {
        self.buses.iter().map(|b| b.phases.len()).sum()
    }

    /// Index of the first phase of `bus` in the bus-phase numbering.
    pub fn bus_offset(&self, bus: u32) -> Option<usize> {
        self.bus_position.get(&bus).map(|&p| self.bus_offset[p])
    }

    pub fn bus_phase_index(&self, bus: u32, phase: u8) -> Option<usize> {
        let pos = *self.bus_position.get(&bus)?;
        let local = self.buses[pos].phases.iter().position(|&p| p == phase)?;
        Some(self.bus_offset[pos] + local)
    }

    /// All bus-phase pairs in state order.
    pub fn bus_phases(&self) -> Vec<BusPhase> {
        self.buses
            .iter()
            .flat_map(|b| b.phases.iter().map(move |&phase| BusPhase { bus: b.id, phase }))
            .collect()
    }

    /// Mask over the bus-phase numbering, true at slack phases.
    pub fn slack_mask(&self) -> Vec<bool> {
        let slack_id = self.slack_bus().id;
        self.bus_phases().iter().map(|bp| bp.bus == slack_id).collect()
    }

    /// Bus-phase indices of the non-slack buses, in state order.
    pub fn free_indices(&self) -> Vec<usize> {
        self.slack_mask()
            .iter()
            .enumerate()
            .filter(|(_, &s)| !s)
            .map(|(i, _)| i)
            .collect()
    }

    /// Bus ids in breadth-first order from the slack.
    pub fn bfs_order(&self) -> Vec<u32> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.buses.len());
        let mut queue = VecDeque::from([self.slack_bus().id]);
        seen.insert(self.slack_bus().id);
        while let Some(u) = queue.pop_front() {
            out.push(u);
            for br in &self.branches {
                let other = if br.from == u {
                    br.to
                } else if br.to == u {
                    br.from
                } else {
                    continue;
                };
                if seen.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        out
    }
}

fn check_block(
    branch: usize,
    name: &str,
    block: &DMatrix<Complex64>,
    n: usize,
) -> Result<(), GridError> {
    if block.nrows() != n || block.ncols() != n {
        return Err(GridError::BlockShape {
            branch,
            what: format!(
                "{name} block is {}x{}, endpoints have {n} phases",
                block.nrows(),
                block.ncols()
            ),
        });
    }
    if block.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(GridError::BlockShape {
            branch,
            what: format!("{name} block has non-finite entries"),
        });
    }
    for k in 0..n {
        for l in (k + 1)..n {
            if (block[(k, l)] - block[(l, k)]).norm() > RECIPROCITY_TOL {
                return Err(GridError::BlockShape {
                    branch,
                    what: format!("{name} block is not symmetric (non-reciprocal)"),
                });
            }
        }
    }
    Ok(())
}

/// Complex nodal admittance matrix over the bus-phase numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix(pub DMatrix<Complex64>);

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Conductance part `G`.
    pub fn conductance(&self) -> DMatrix<f64> {
        self.0.map(|c| c.re)
    }

    /// Susceptance part `B`.
    pub fn susceptance(&self) -> DMatrix<f64> {
        self.0.map(|c| c.im)
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }
}

/// Assemble the nodal admittance matrix.
///
/// Off-diagonal block `(i, j)` is minus the series block of every branch
/// joining `i` and `j` (parallel branches add); diagonal block `(i, i)` is the
/// sum of incident series blocks plus the shunt blocks at that end.
pub fn build_ybus(network: &Network) -> AdmittanceMatrix {
    let n = network.bus_phase_count();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in network.branches() {
        let fi = network.bus_offset(br.from).expect("validated");
        let ti = network.bus_offset(br.to).expect("validated");
        let p = br.series.nrows();
        for k in 0..p {
            for l in 0..p {
                let ys = br.series[(k, l)];
                y[(fi + k, fi + l)] += ys;
                y[(ti + k, ti + l)] += ys;
                y[(fi + k, ti + l)] -= ys;
                y[(ti + k, fi + l)] -= ys;
            }
        }
        if let Some(sh) = &br.shunt_from {
            for k in 0..p {
                for l in 0..p {
                    y[(fi + k, fi + l)] += sh[(k, l)];
                }
            }
        }
        if let Some(sh) = &br.shunt_to {
            for k in 0..p {
                for l in 0..p {
                    y[(ti + k, ti + l)] += sh[(k, l)];
                }
            }
        }
    }
    AdmittanceMatrix(y)
}
