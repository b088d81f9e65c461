// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

use qtwin_core::calibration::{empirical_histogram, parse_snapshot, Property, SnapshotFormat};

const JSON: &[u8] = include_bytes!("../../../fixtures/synthetic_sherbrooke.json");
const CSV: &[u8] = include_bytes!("../../../fixtures/synthetic_sherbrooke.csv");

#[test]
fn csv_and_json_fixtures_agree() {
    let json = parse_snapshot(JSON, &SnapshotFormat::CanonicalJson).unwrap();
    assert!(json.warnings.is_empty(), "{:?}", json.warnings);
    let csv = parse_snapshot(
        CSV,
        &SnapshotFormat::CalibrationCsv {
            backend: None,
            timestamp: None,
        },
    )
    .unwrap();
    assert!(csv.warnings.is_empty(), "{:?}", csv.warnings);
    let sort = |mut g: Vec<qtwin_core::GateRecord>| {
        g.sort_by(|a, b| (&a.name, &a.qubits).cmp(&(&b.name, &b.qubits)));
        g
    };
    assert_eq!(csv.snapshot.qubits, json.snapshot.qubits);
    assert_eq!(sort(csv.snapshot.gates.clone()), sort(json.snapshot.gates.clone()));
    assert_eq!(csv.snapshot.key(), json.snapshot.key());
}

#[test]
fn canonical_json_is_a_fixed_point() {
    let snap = parse_snapshot(JSON, &SnapshotFormat::CanonicalJson).unwrap().snapshot;
    assert_eq!(snap.to_canonical_json().as_bytes(), JSON);
}

#[test]
fn fixture_shape() {
    let snap = parse_snapshot(JSON, &SnapshotFormat::CanonicalJson).unwrap().snapshot;
    assert_eq!(snap.qubits.len(), 127);
    assert!(snap.qubits.iter().any(|q| q.t2_us > 2.0 * q.t1_us));
    for p in Property::ALL {
        let h = empirical_histogram(&snap, p, 20).unwrap();
        assert_eq!(h.total(), if p == Property::GateError { h.total() } else { 127 });
    }
}
