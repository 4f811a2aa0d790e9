mod common;

use std::path::Path;

use bayes_dsse::grid::{build_ybus, load_network, network_from_json, network_to_json, Branch, Bus, BusKind, Network};
use num_complex::Complex64;
use proptest::prelude::*;

fn workspace_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ybus_of_reciprocal_network_is_symmetric(seed in any::<u64>(), buses in 2u32..10, three in any::<bool>(), shunts in any::<bool>()) {
        let net = common::random_radial(buses, if three { 3 } else { 1 }, shunts, &mut common::rng(seed));
        let y = build_ybus(&net).0;
        prop_assert!((&y - y.transpose()).iter().all(|d| d.norm() < 1e-12));
    }

    #[test]
    fn ybus_rows_sum_to_zero_without_shunts(seed in any::<u64>(), buses in 2u32..10, three in any::<bool>()) {
        let net = common::random_radial(buses, if three { 3 } else { 1 }, false, &mut common::rng(seed));
        let y = build_ybus(&net).0;
        for r in 0..y.nrows() {
            let s: Complex64 = y.row(r).iter().sum();
            prop_assert!(s.norm() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn json_round_trip_is_identity(seed in any::<u64>(), buses in 2u32..8, three in any::<bool>(), shunts in any::<bool>()) {
        let net = common::random_radial(buses, if three { 3 } else { 1 }, shunts, &mut common::rng(seed));
        let back = network_from_json(&network_to_json(&net)).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(build_ybus(&back), build_ybus(&net));
    }
}

#[test]
fn parallel_branches_add_admittances() {
    let buses = vec![
        Bus { id: 1, kind: BusKind::Slack, phases: vec![1] },
        Bus { id: 2, kind: BusKind::PQ, phases: vec![1] },
    ];
    let y1 = Complex64::new(2.0, -6.0);
    let y2 = Complex64::new(1.0, -3.0);
    let pair = Network::new(1, 1.0, buses.clone(), vec![Branch::single(1, 2, y1), Branch::single(1, 2, y2)]).unwrap();
    let single = Network::new(1, 1.0, buses, vec![Branch::single(1, 2, y1 + y2)]).unwrap();
    assert_eq!(build_ybus(&pair), build_ybus(&single));
}

#[test]
fn shipped_three_phase_feeder_has_twelve_state_phases() {
    let net = load_network(workspace_file("configs/feeder4_network.json")).unwrap();
    assert_eq!(net.phase_count(), 3);
    assert_eq!(net.buses().len(), 4);
    assert_eq!(net.bus_phase_count(), 12);
    assert_eq!(net.free_indices().len(), 9);
}

#[test]
fn shipped_desk_network_is_radial_and_connected() {
    let net = load_network(workspace_file("configs/desk12_network.json")).unwrap();
    assert_eq!(net.buses().len(), 12);
    assert_eq!(net.branches().len(), 11);
    assert_eq!(net.bfs_order().len(), 12);
}
