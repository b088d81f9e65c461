// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Quantum digital twins.
//!
//! A twin simulates `m` qubits. Each simulated qubit takes one whole
//! calibration record drawn uniformly with replacement from the snapshot, so
//! T1, T2 and readout errors stay correlated the way they were measured.
//! Gate noise is drawn the same way, one record per gate name.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{format_timestamp, CalibrationSnapshot, GateRecord};
use crate::noise::{self, ConfusionMatrix, NoiseError};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum TwinError {
    #[error("snapshot has no qubit records")]
    EmptySnapshot,
    #[error("register size must be at least 1")]
    EmptyRegister,
    #[error("twin count must be at least 1")]
    NoTwins,
    #[error("twin was sampled from {expected}, not {actual}")]
    SourceMismatch { expected: String, actual: String },
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Noise parameters of one simulated qubit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitNoise {
    /// Snapshot qubit the record was drawn from.
    pub source_qubit: usize,
    pub t1_us: f64,
    /// Clamped to `2 * t1_us`.
    pub t2_us: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateNoise {
    pub duration_ns: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwinSource {
    pub backend: String,
    pub timestamp: String,
}

impl TwinSource {
    fn of(snapshot: &CalibrationSnapshot) -> Self {
        Self {
            backend: snapshot.backend.clone(),
            timestamp: format_timestamp(&snapshot.timestamp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoQubitGateNoise {
    pub name: String,
    #[serde(flatten)]
    pub noise: GateNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumDigitalTwin {
    pub register_size: usize,
    pub qubits: Vec<QubitNoise>,
    /// Gate name -> drawn calibration. Names absent here run noiselessly.
    pub one_qubit_gates: BTreeMap<String, GateNoise>,
    pub two_qubit_gate: Option<TwoQubitGateNoise>,
    pub seed: u64,
    pub source: TwinSource,
}

impl QuantumDigitalTwin {
    /// A hand-built twin with the same noise on every qubit and every
    /// single-qubit gate kind (`ry`, `rz`, `sx`, `x`).
    pub fn uniform(
        register_size: usize,
        t1_us: f64,
        t2_us: f64,
        confusion: ConfusionMatrix,
        one_qubit: GateNoise,
        two_qubit: GateNoise,
    ) -> Result<Self, TwinError> {
        if register_size == 0 {
            return Err(TwinError::EmptyRegister);
        }
        // Validates the parameters.
        noise::thermal_relaxation(t1_us, t2_us, one_qubit.duration_ns)?;
        noise::depolarizing(one_qubit.error, 1)?;
        noise::depolarizing(two_qubit.error, 2)?;
        let qubit = QubitNoise {
            source_qubit: 0,
            t1_us,
            t2_us: noise::clamp_t2(t1_us, t2_us),
            confusion,
        };
        Ok(Self {
            register_size,
            qubits: vec![qubit; register_size],
            one_qubit_gates: ["ry", "rz", "sx", "x"]
                .iter()
                .map(|n| (n.to_string(), one_qubit))
                .collect(),
            two_qubit_gate: Some(TwoQubitGateNoise {
                name: "cx".into(),
                noise: two_qubit,
            }),
            seed: 0,
            source: TwinSource {
                backend: "uniform".into(),
                timestamp: "1970-01-01T00:00:00Z".into(),
            },
        })
    }

    pub fn confusions(&self) -> Vec<ConfusionMatrix> {
        self.qubits.iter().map(|q| q.confusion).collect()
    }

    /// Re-samples the twin from its recorded provenance.
    pub fn reconstruct(&self, snapshot: &CalibrationSnapshot) -> Result<Self, TwinError> {
        let actual = TwinSource::of(snapshot);
        if actual != self.source {
            return Err(TwinError::SourceMismatch {
                expected: format!("{}@{}", self.source.backend, self.source.timestamp),
                actual: format!("{}@{}", actual.backend, actual.timestamp),
            });
        }
        sample_twin(snapshot, self.register_size, self.seed)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("twin serialization cannot fail");
        s.push('\n');
        s
    }
}

fn draw<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    // Drawing through u64 keeps the stream identical on 32- and 64-bit targets.
    &items[rng.random_range(0..items.len() as u64) as usize]
}

/// Samples a twin of `register_size` qubits. Deterministic in
/// `(snapshot, register_size, seed)`.
pub fn sample_twin(
    snapshot: &CalibrationSnapshot,
    register_size: usize,
    seed: u64,
) -> Result<QuantumDigitalTwin, TwinError> {
    if snapshot.qubits.is_empty() {
        return Err(TwinError::EmptySnapshot);
    }
    if register_size == 0 {
        return Err(TwinError::EmptyRegister);
    }
    let mut rng = seed::rng(seed);
    let qubits = (0..register_size)
        .map(|_| {
            let rec = draw(&mut rng, &snapshot.qubits);
            Ok(QubitNoise {
                source_qubit: rec.id,
                t1_us: rec.t1_us,
                t2_us: noise::clamp_t2(rec.t1_us, rec.t2_us),
                confusion: noise::readout_confusion(rec.prob_meas1_prep0, rec.prob_meas0_prep1)?,
            })
        })
        .collect::<Result<Vec<_>, TwinError>>()?;

    let mut one_q: BTreeMap<&str, Vec<&GateRecord>> = BTreeMap::new();
    let mut two_q: BTreeMap<&str, Vec<&GateRecord>> = BTreeMap::new();
    for g in &snapshot.gates {
        let groups = if g.arity() == 1 { &mut one_q } else { &mut two_q };
        groups.entry(g.name.as_str()).or_default().push(g);
    }
    let one_qubit_gates = one_q
        .iter()
        .map(|(name, recs)| {
            let rec = draw(&mut rng, recs);
            (
                name.to_string(),
                GateNoise {
                    duration_ns: rec.duration_ns,
                    error: rec.error,
                },
            )
        })
        .collect();
    // The most common two-qubit gate is taken as the native entangler.
    let native = two_q
        .iter()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(a.0)));
    let two_qubit_gate = native.map(|(name, recs)| {
        let rec = draw(&mut rng, recs);
        TwoQubitGateNoise {
            name: name.to_string(),
            noise: GateNoise {
                duration_ns: rec.duration_ns,
                error: rec.error,
            },
        }
    });

    Ok(QuantumDigitalTwin {
        register_size,
        qubits,
        one_qubit_gates,
        two_qubit_gate,
        seed,
        source: TwinSource::of(snapshot),
    })
}

/// Seed of twin `index` in a replica set.
pub fn twin_seed(master_seed: u64, index: usize) -> u64 {
    seed::split(master_seed, index as u64)
}

/// `n` twins with seeds `split(master_seed, i)`. With `identical`, every
/// twin reuses the seed of twin 0.
pub fn replicate_twins(
    snapshot: &CalibrationSnapshot,
    n: usize,
    register_size: usize,
    master_seed: u64,
    identical: bool,
) -> Result<Vec<QuantumDigitalTwin>, TwinError> {
    if n == 0 {
        return Err(TwinError::NoTwins);
    }
    (0..n)
        .map(|i| {
            sample_twin(
                snapshot,
                register_size,
                twin_seed(master_seed, if identical { 0 } else { i }),
            )
        })
        .collect()
}
