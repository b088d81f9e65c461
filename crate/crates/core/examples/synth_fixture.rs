// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Regenerates the synthetic 127-qubit calibration fixtures.
//!
//! ```text
//! cargo run -p qtwin-core --example synth_fixture -- fixtures
//! ```
//!
//! The values are drawn from log-normal distributions with plausible
//! superconducting-device medians. They are not measurements of any device.

use std::path::PathBuf;

use qtwin_core::calibration::{parse_timestamp, CalibrationSnapshot, GateRecord, QubitRecord};
use qtwin_core::seed;
use rand_distr::{Distribution, LogNormal};

const QUBITS: usize = 127;
const SX_NS: f64 = 56.889;
const ECR_NS: f64 = 533.333;

fn round_to(v: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (v * scale).round() / scale
}

fn round_sig(v: f64, sig: i32) -> f64 {
    let digits = sig - 1 - v.abs().log10().floor() as i32;
    round_to(v, digits)
}

/// Nearest-neighbour chain. Twin sampling only looks at the list of
/// two-qubit records, not at the topology.
fn edges() -> Vec<(usize, usize)> {
    (0..QUBITS - 1).map(|q| (q, q + 1)).collect()
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&out).expect("create output directory");
    let mut rng = seed::rng(2024);

    let t1 = LogNormal::new(260f64.ln(), 0.35).unwrap();
    let t2 = LogNormal::new(170f64.ln(), 0.5).unwrap();
    let p10 = LogNormal::new(0.012f64.ln(), 0.6).unwrap();
    let p01 = LogNormal::new(0.02f64.ln(), 0.6).unwrap();
    let sx_err = LogNormal::new(2.4e-4f64.ln(), 0.5).unwrap();
    let ecr_err = LogNormal::new(7e-3f64.ln(), 0.45).unwrap();

    let mut qubits = Vec::with_capacity(QUBITS);
    let mut gates = Vec::new();
    for id in 0..QUBITS {
        let t1_us = round_to(t1.sample(&mut rng), 2);
        let mut t2_us = round_to(t2.sample(&mut rng), 2);
        // A few records violate T2 <= 2 T1, as real exports occasionally do.
        if id % 41 == 7 {
            t2_us = round_to(2.2 * t1_us, 2);
        }
        qubits.push(QubitRecord {
            id,
            t1_us,
            t2_us,
            prob_meas1_prep0: round_sig(p10.sample(&mut rng).min(0.3), 3),
            prob_meas0_prep1: round_sig(p01.sample(&mut rng).min(0.3), 3),
        });
        let e = round_sig(sx_err.sample(&mut rng).min(0.05), 3);
        for name in ["id", "sx", "x"] {
            gates.push(GateRecord {
                name: name.into(),
                qubits: vec![id],
                duration_ns: SX_NS,
                error: e,
            });
        }
        gates.push(GateRecord {
            name: "rz".into(),
            qubits: vec![id],
            duration_ns: 0.0,
            error: 0.0,
        });
    }
    for (a, b) in edges() {
        gates.push(GateRecord {
            name: "ecr".into(),
            qubits: vec![a, b],
            duration_ns: ECR_NS,
            error: round_sig(ecr_err.sample(&mut rng).min(0.2), 3),
        });
    }
    let timestamp = parse_timestamp("2024-05-01T00:00:00Z").unwrap();
    let snap = CalibrationSnapshot::new("synthetic-sherbrooke", timestamp, qubits, gates).unwrap();
    std::fs::write(out.join("synthetic_sherbrooke.json"), snap.to_canonical_json()).unwrap();
    std::fs::write(out.join("synthetic_sherbrooke.csv"), to_csv(&snap)).unwrap();
    eprintln!("wrote {} qubits to {}", snap.qubits.len(), out.display());
}

fn to_csv(snap: &CalibrationSnapshot) -> String {
    let mut s = String::new();
    s.push_str("# backend: synthetic-sherbrooke\n");
    s.push_str("# timestamp: 2024-05-01T00:00:00Z\n");
    s.push_str("# Synthetic data, not a device export.\n");
    s.push_str(
        "Qubit,T1 (us),T2 (us),Prob meas0 prep1,Prob meas1 prep0,ID error,√x (sx) error,\
         Pauli-X error,RZ error,Single-qubit gate length (ns),ECR error,Gate time (ns)\n",
    );
    let gate = |name: &str, q: usize| {
        snap.gates
            .iter()
            .find(|g| g.name == name && g.qubits == [q])
            .map(|g| g.error)
            .unwrap()
    };
    for q in &snap.qubits {
        let pairs: Vec<&GateRecord> = snap
            .gates
            .iter()
            .filter(|g| g.name == "ecr" && g.qubits.contains(&q.id))
            .collect();
        let errors: Vec<String> = pairs
            .iter()
            .map(|g| format!("{}_{}:{}", g.qubits[0], g.qubits[1], g.error))
            .collect();
        let times: Vec<String> = pairs
            .iter()
            .map(|g| format!("{}_{}:{}", g.qubits[0], g.qubits[1], g.duration_ns))
            .collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            q.id,
            q.t1_us,
            q.t2_us,
            q.prob_meas0_prep1,
            q.prob_meas1_prep0,
            gate("id", q.id),
            gate("sx", q.id),
            gate("x", q.id),
            gate("rz", q.id),
            SX_NS,
            errors.join(";"),
            times.join(";"),
        ));
    }
    s
}
