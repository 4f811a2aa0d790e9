//! JSON grid file.
//!
//! ```json
//! {
//!   "phase_count": 1,
//!   "base_power_mva": 1.0,
//!   "buses": [{"id": 1, "kind": "Slack", "phases": [1]}, ...],
//!   "branches": [{"from": 1, "to": 2, "series": [[{"re": 0.0, "im": -10.0}]]}, ...]
//! }
//! ```
//!
//! `shunt_from` / `shunt_to` are optional blocks with the same layout as
//! `series`. Floats are written in shortest round-trip form, so
//! load -> save -> load reproduces the network bit for bit.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Branch, Bus, BusKind, GridError, Network};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComplexJson {
    re: f64,
    im: f64,
}

type BlockJson = Vec<Vec<ComplexJson>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusJson {
    id: u32,
    kind: BusKind,
    phases: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchJson {
    from: u32,
    to: u32,
    series: BlockJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shunt_from: Option<BlockJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shunt_to: Option<BlockJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkJson {
    phase_count: u8,
    base_power_mva: f64,
    buses: Vec<BusJson>,
    branches: Vec<BranchJson>,
}

fn block_from_json(branch: usize, name: &str, rows: &BlockJson) -> Result<DMatrix<Complex64>, GridError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(GridError::Schema(format!(
            "branch {branch}: {name} must be a non-empty square array"
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let c = rows[i][j];
        Complex64::new(c.re, c.im)
    }))
}

fn block_to_json(m: &DMatrix<Complex64>) -> BlockJson {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| ComplexJson { re: m[(i, j)].re, im: m[(i, j)].im })
                .collect()
        })
        .collect()
}

pub fn network_from_json(text: &str) -> Result<Network, GridError> {
    let doc: NetworkJson =
        serde_json::from_str(text).map_err(|e| GridError::Schema(e.to_string()))?;
    let buses = doc
        .buses
        .into_iter()
        .map(|b| Bus { id: b.id, kind: b.kind, phases: b.phases })
        .collect();
    let mut branches = Vec::with_capacity(doc.branches.len());
    for (idx, b) in doc.branches.iter().enumerate() {
        branches.push(Branch {
            from: b.from,
            to: b.to,
            series: block_from_json(idx, "series", &b.series)?,
            shunt_from: b
                .shunt_from
                .as_ref()
                .map(|s| block_from_json(idx, "shunt_from", s))
                .transpose()?,
            shunt_to: b
                .shunt_to
                .as_ref()
                .map(|s| block_from_json(idx, "shunt_to", s))
                .transpose()?,
        });
    }
    Network::new(doc.phase_count, doc.base_power_mva, buses, branches)
}

pub fn network_to_json(network: &Network) -> String {
    let doc = NetworkJson {
        phase_count: network.phase_count(),
        base_power_mva: network.base_power_mva(),
        buses: network
            .buses()
            .iter()
            .map(|b| BusJson { id: b.id, kind: b.kind, phases: b.phases.clone() })
            .collect(),
        branches: network
            .branches()
            .iter()
            .map(|b| BranchJson {
                from: b.from,
                to: b.to,
                series: block_to_json(&b.series),
                shunt_from: b.shunt_from.as_ref().map(block_to_json),
                shunt_to: b.shunt_to.as_ref().map(block_to_json),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("network serializes")
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network, GridError> {
    let text = std::fs::read_to_string(path)?;
    network_from_json(&text)
}

pub fn save_network(network: &Network, path: impl AsRef<Path>) -> Result<(), GridError> {
    std::fs::write(path, network_to_json(network))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "phase_count": 1,
        "base_power_mva": 10.0,
        "buses": [
            {"id": 1, "kind": "Slack", "phases": [1]},
            {"id": 2, "kind": "PQ", "phases": [1]}
        ],
        "branches": [
            {"from": 1, "to": 2, "series": [[{"re": 0.0, "im": -10.0}]]}
        ]
    }"#;

    #[test]
    fn minimal_file_loads() {
        let net = network_from_json(MINIMAL).unwrap();
        assert_eq!(net.buses().len(), 2);
        assert_eq!(net.phase_count(), 1);
        assert_eq!(net.bus_phase_count(), 2);
        assert_eq!(net.base_power_mva(), 10.0);
    }

    #[test]
    fn two_slacks_rejected() {
        let text = MINIMAL.replace(r#""kind": "PQ""#, r#""kind": "Slack""#);
        let err = network_from_json(&text).unwrap_err();
        assert_eq!(err.code(), "multiple-slack");
        assert!(err.to_string().contains("multiple slack"));
    }

    #[test]
    fn schema_errors() {
        let err = network_from_json(r#"{"phase_count": 1}"#).unwrap_err();
        assert_eq!(err.code(), "schema");
        let text = MINIMAL.replace(r#""from": 1"#, r#""from": 1, "rating": 3"#);
        assert_eq!(network_from_json(&text).unwrap_err().code(), "schema");
        let text = MINIMAL.replace(r#"[[{"re": 0.0, "im": -10.0}]]"#, r#"[[{"re": 0.0, "im": -10.0}, {"re": 0.0, "im": 0.0}]]"#);
        assert_eq!(network_from_json(&text).unwrap_err().code(), "schema");
    }

    #[test]
    fn round_trip_is_identity() {
        let net = network_from_json(MINIMAL).unwrap();
        let again = network_from_json(&network_to_json(&net)).unwrap();
        assert_eq!(net, again);
        assert_eq!(network_to_json(&net), network_to_json(&again));
    }
}
