// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Circuits and the density-matrix engine.
//!
//! Qubit 0 is the most significant bit of a basis index, so the basis state
//! `|q0 q1 ... q_{m-1}>` has index `sum q_i 2^(m-1-i)` and bitstrings print
//! qubit 0 first.
//!
//! When a twin is attached, every gate is followed by thermal relaxation over
//! the gate duration on each participating qubit and then by depolarizing
//! noise at the gate's error rate. There is no idle-time noise.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, c, CMatrix, ONE, ZERO};
use crate::noise::{self, ConfusionMatrix, NoiseError};
use crate::seed;
use crate::twin::{GateNoise, QuantumDigitalTwin};

/// Dense simulation is capped at this many qubits.
pub const MAX_QUBITS: usize = 10;

/// Trace and Hermiticity tolerance for a valid state.
pub const STATE_TOLERANCE: f64 = 1e-10;
/// Lowest admissible eigenvalue of a valid state.
pub const EIGEN_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("register size {0} outside 1..={MAX_QUBITS}")]
    RegisterSize(usize),
    #[error("gate {kind} acts on {got} qubits, expected {expected}")]
    Arity {
        kind: GateKind,
        got: usize,
        expected: usize,
    },
    #[error("qubit {qubit} out of range for a {register_size}-qubit register")]
    QubitOutOfRange { qubit: usize, register_size: usize },
    #[error("gate {0} acts on the same qubit twice")]
    RepeatedQubit(GateKind),
    #[error("gate {0} needs exactly one of a bound angle or a slot")]
    Parameter(GateKind),
    #[error("slot {0} is unbound")]
    UnboundSlot(SlotId),
    #[error("duplicate slot {0}")]
    DuplicateSlot(SlotId),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("circuit has {circuit} qubits but the twin has {twin}")]
    SizeMismatch { circuit: usize, twin: usize },
    #[error("shots must be at least 1")]
    ZeroShots,
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    RY,
    RZ,
    X,
    CX,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            Self::CX => 2,
            _ => 1,
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, Self::RY | Self::RZ)
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RY => "ry",
            Self::RZ => "rz",
            Self::X => "x",
            Self::CX => "cx",
        })
    }
}

/// Symbolic name of an unbound rotation angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId(pub u32);

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Bound(f64),
    Slot(SlotId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    /// `Some` exactly for rotation kinds.
    pub param: Option<Param>,
}

impl Gate {
    pub fn ry(qubit: usize, theta: f64) -> Self {
        Self::rotation(GateKind::RY, qubit, Param::Bound(theta))
    }

    pub fn rz(qubit: usize, theta: f64) -> Self {
        Self::rotation(GateKind::RZ, qubit, Param::Bound(theta))
    }

    pub fn ry_slot(qubit: usize, slot: SlotId) -> Self {
        Self::rotation(GateKind::RY, qubit, Param::Slot(slot))
    }

    pub fn x(qubit: usize) -> Self {
        Self {
            kind: GateKind::X,
            qubits: vec![qubit],
            param: None,
        }
    }

    pub fn cx(control: usize, target: usize) -> Self {
        Self {
            kind: GateKind::CX,
            qubits: vec![control, target],
            param: None,
        }
    }

    fn rotation(kind: GateKind, qubit: usize, param: Param) -> Self {
        Self {
            kind,
            qubits: vec![qubit],
            param: Some(param),
        }
    }

    fn check(&self, register_size: usize) -> Result<()> {
        if self.qubits.len() != self.kind.arity() {
            return Err(SimError::Arity {
                kind: self.kind,
                got: self.qubits.len(),
                expected: self.kind.arity(),
            });
        }
        if let Some(&qubit) = self.qubits.iter().find(|&&q| q >= register_size) {
            return Err(SimError::QubitOutOfRange { qubit, register_size });
        }
        if self.qubits.len() == 2 && self.qubits[0] == self.qubits[1] {
            return Err(SimError::RepeatedQubit(self.kind));
        }
        if self.kind.is_rotation() != self.param.is_some() {
            return Err(SimError::Parameter(self.kind));
        }
        Ok(())
    }

    /// Unitary on the gate's own qubits (first listed qubit most significant).
    pub fn unitary(&self) -> Result<CMatrix> {
        let angle = match self.param {
            Some(Param::Bound(t)) => t,
            Some(Param::Slot(s)) => return Err(SimError::UnboundSlot(s)),
            None => 0.0,
        };
        Ok(match self.kind {
            GateKind::RY => {
                let (s, co) = (angle / 2.0).sin_cos();
                linalg::from_rows([[c(co, 0.0), c(-s, 0.0)], [c(s, 0.0), c(co, 0.0)]])
            }
            GateKind::RZ => {
                let (s, co) = (angle / 2.0).sin_cos();
                linalg::from_rows([[c(co, -s), ZERO], [ZERO, c(co, s)]])
            }
            GateKind::X => linalg::from_rows([[ZERO, ONE], [ONE, ZERO]]),
            GateKind::CX => linalg::from_rows([
                [ONE, ZERO, ZERO, ZERO],
                [ZERO, ONE, ZERO, ZERO],
                [ZERO, ZERO, ZERO, ONE],
                [ZERO, ZERO, ONE, ZERO],
            ]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    register_size: usize,
    gates: Vec<Gate>,
    /// Slot -> positions of the gates that use it.
    slots: BTreeMap<SlotId, Vec<usize>>,
}

impl Circuit {
    pub fn new(register_size: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&register_size) {
            return Err(SimError::RegisterSize(register_size));
        }
        Ok(Self {
            register_size,
            gates: Vec::new(),
            slots: BTreeMap::new(),
        })
    }

    pub fn register_size(&self) -> usize {
        self.register_size
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn slots(&self) -> &BTreeMap<SlotId, Vec<usize>> {
        &self.slots
    }

    pub fn push(&mut self, gate: Gate) -> Result<&mut Self> {
        gate.check(self.register_size)?;
        if let Some(Param::Slot(s)) = gate.param {
            self.slots.entry(s).or_default().push(self.gates.len());
        }
        self.gates.push(gate);
        Ok(self)
    }

    /// Appends `other`'s gates; both must have the same register size.
    pub fn extend(&mut self, other: &Circuit) -> Result<&mut Self> {
        if other.register_size != self.register_size {
            return Err(SimError::SizeMismatch {
                circuit: self.register_size,
                twin: other.register_size,
            });
        }
        for g in &other.gates {
            self.push(g.clone())?;
        }
        Ok(self)
    }

    pub fn is_bound(&self) -> bool {
        self.slots.is_empty()
    }

    /// Replaces every slot with a value from `values`.
    pub fn bind(&self, values: &BTreeMap<SlotId, f64>) -> Result<Circuit> {
        let mut gates = self.gates.clone();
        for (slot, positions) in &self.slots {
            let v = *values.get(slot).ok_or(SimError::UnboundSlot(*slot))?;
            for &p in positions {
                gates[p].param = Some(Param::Bound(v));
            }
        }
        Ok(Circuit {
            register_size: self.register_size,
            gates,
            slots: BTreeMap::new(),
        })
    }

    /// Debug dump: `[{"kind", "qubits", "param" | "slot"}]`. Not a stable format.
    pub fn to_json(&self) -> String {
        let items: Vec<serde_json::Value> = self
            .gates
            .iter()
            .map(|g| {
                let mut obj = serde_json::json!({ "kind": g.kind, "qubits": g.qubits });
                match g.param {
                    Some(Param::Bound(v)) => obj["param"] = v.into(),
                    Some(Param::Slot(s)) => obj["slot"] = s.0.into(),
                    None => {}
                }
                obj
            })
            .collect();
        serde_json::to_string(&items).expect("circuit dump cannot fail")
    }
}

/// `RY(features[i])` on qubit `i`.
pub fn build_embedding_circuit(register_size: usize, features: &[f64]) -> Result<Circuit> {
    if features.len() != register_size {
        return Err(SimError::Length {
            expected: register_size,
            got: features.len(),
        });
    }
    let mut circuit = Circuit::new(register_size)?;
    for (q, &f) in features.iter().enumerate() {
        circuit.push(Gate::ry(q, f))?;
    }
    Ok(circuit)
}

/// `RY(slot_i)` on qubit `i`, optionally followed by a CX ring
/// `0->1, 1->2, ..., (m-1)->0`. A single qubit gets no ring.
pub fn build_variational_layer(register_size: usize, slots: &[SlotId], entangle: bool) -> Result<Circuit> {
    if slots.len() != register_size {
        return Err(SimError::Length {
            expected: register_size,
            got: slots.len(),
        });
    }
    let mut circuit = Circuit::new(register_size)?;
    for (q, &s) in slots.iter().enumerate() {
        if circuit.slots.contains_key(&s) {
            return Err(SimError::DuplicateSlot(s));
        }
        circuit.push(Gate::ry_slot(q, s))?;
    }
    if entangle && register_size > 1 {
        for q in 0..register_size {
            circuit.push(Gate::cx(q, (q + 1) % register_size))?;
        }
    }
    Ok(circuit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    register_size: usize,
    data: CMatrix,
}

impl DensityMatrix {
    /// `|0...0><0...0|`.
    pub fn ground(register_size: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&register_size) {
            return Err(SimError::RegisterSize(register_size));
        }
        let d = 1 << register_size;
        let mut data = Array2::zeros((d, d));
        data[[0, 0]] = ONE;
        Ok(Self { register_size, data })
    }

    pub fn maximally_mixed(register_size: usize) -> Result<Self> {
        let mut rho = Self::ground(register_size)?;
        let d = rho.dim();
        rho.data = linalg::identity(d).mapv(|z| z / d as f64);
        Ok(rho)
    }

    /// Wraps a matrix after checking every state invariant.
    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        let d = data.nrows();
        if data.ncols() != d || !d.is_power_of_two() || d < 2 {
            return Err(SimError::InvalidState(format!(
                "shape {:?} is not 2^m x 2^m",
                data.dim()
            )));
        }
        let rho = Self {
            register_size: d.trailing_zeros() as usize,
            data,
        };
        rho.validate()?;
        Ok(rho)
    }

    pub fn register_size(&self) -> usize {
        self.register_size
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn trace(&self) -> Complex64 {
        self.data.diag().sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        linalg::max_abs_diff(&self.data, &linalg::dagger(&self.data))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.data)
    }

    /// Cheap per-step check: unit trace and Hermiticity.
    pub fn check_trace_and_hermiticity(&self) -> Result<()> {
        let tr = self.trace();
        if (tr.re - 1.0).abs() > STATE_TOLERANCE || tr.im.abs() > STATE_TOLERANCE {
            return Err(SimError::InvalidState(format!("trace {tr}")));
        }
        let herm = self.hermiticity_error();
        if herm > STATE_TOLERANCE {
            return Err(SimError::InvalidState(format!("hermiticity error {herm:e}")));
        }
        Ok(())
    }

    /// Full check including positivity.
    pub fn validate(&self) -> Result<()> {
        self.check_trace_and_hermiticity()?;
        let min = self.min_eigenvalue();
        if min < EIGEN_TOLERANCE {
            return Err(SimError::InvalidState(format!("eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Index offsets of the local basis states of `qubits` and the base
    /// indices with all those bits cleared.
    fn local_layout(&self, qubits: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let m = self.register_size;
        let masks: Vec<usize> = qubits.iter().map(|&q| 1 << (m - 1 - q)).collect();
        let k = qubits.len();
        let offsets = (0..1usize << k)
            .map(|local| {
                (0..k)
                    .filter(|&b| local & (1 << (k - 1 - b)) != 0)
                    .map(|b| masks[b])
                    .sum()
            })
            .collect();
        let all: usize = masks.iter().sum();
        let bases = (0..self.dim()).filter(|i| i & all == 0).collect();
        (offsets, bases)
    }

    /// `rho -> U rho U^dagger` with `U` acting on `qubits`.
    pub fn apply_unitary(&mut self, u: &CMatrix, qubits: &[usize]) {
        let (offsets, bases) = self.local_layout(qubits);
        let d = offsets.len();
        let n = self.dim();
        let mut buf = vec![ZERO; d];
        // Rows: rho <- U rho.
        for &b in &bases {
            for col in 0..n {
                for (l, off) in offsets.iter().enumerate() {
                    buf[l] = self.data[[b + off, col]];
                }
                for (l, off) in offsets.iter().enumerate() {
                    let mut acc = ZERO;
                    for (k, v) in buf.iter().enumerate() {
                        acc += u[[l, k]] * v;
                    }
                    self.data[[b + off, col]] = acc;
                }
            }
        }
        // Columns: rho <- rho U^dagger.
        for row in 0..n {
            for &b in &bases {
                for (l, off) in offsets.iter().enumerate() {
                    buf[l] = self.data[[row, b + off]];
                }
                for (l, off) in offsets.iter().enumerate() {
                    let mut acc = ZERO;
                    for (k, v) in buf.iter().enumerate() {
                        acc += v * u[[l, k]].conj();
                    }
                    self.data[[row, b + off]] = acc;
                }
            }
        }
    }

    /// Applies a channel given as its superoperator (see
    /// [`noise::KrausChannel::superoperator`]) on `qubits`.
    pub fn apply_superoperator(&mut self, s: &CMatrix, qubits: &[usize]) {
        let (offsets, bases) = self.local_layout(qubits);
        let d = offsets.len();
        let mut block = vec![ZERO; d * d];
        for &rb in &bases {
            for &cb in &bases {
                for (i, ro) in offsets.iter().enumerate() {
                    for (j, co) in offsets.iter().enumerate() {
                        block[i * d + j] = self.data[[rb + ro, cb + co]];
                    }
                }
                for (i, ro) in offsets.iter().enumerate() {
                    for (j, co) in offsets.iter().enumerate() {
                        let row = i * d + j;
                        let mut acc = ZERO;
                        for (k, v) in block.iter().enumerate() {
                            acc += s[[row, k]] * v;
                        }
                        self.data[[rb + ro, cb + co]] = acc;
                    }
                }
            }
        }
    }

    pub fn apply_channel(&mut self, channel: &noise::KrausChannel, qubits: &[usize]) {
        if !channel.is_identity() {
            self.apply_superoperator(&channel.superoperator(), qubits);
        }
    }
}

/// `<Z_i> = Tr(rho Z_i)` for every qubit.
pub fn expectation_z(rho: &DensityMatrix) -> Vec<f64> {
    let m = rho.register_size;
    let mut z = vec![0.0; m];
    for b in 0..rho.dim() {
        let p = rho.data[[b, b]].re;
        for (q, zq) in z.iter_mut().enumerate() {
            if b & (1 << (m - 1 - q)) == 0 {
                *zq += p;
            } else {
                *zq -= p;
            }
        }
    }
    z
}

/// Draws `shots` outcomes from `diag(rho)` (negative entries clamped to 0,
/// then renormalized) and flips each bit through its qubit's confusion
/// matrix. Keys are bitstrings with qubit 0 first.
pub fn sample_counts(
    rho: &DensityMatrix,
    shots: u64,
    confusions: &[ConfusionMatrix],
    seed: u64,
) -> Result<BTreeMap<String, u64>> {
    if shots == 0 {
        return Err(SimError::ZeroShots);
    }
    let m = rho.register_size;
    if confusions.len() != m {
        return Err(SimError::Length {
            expected: m,
            got: confusions.len(),
        });
    }
    let weights: Vec<f64> = (0..rho.dim()).map(|b| rho.data[[b, b]].re.max(0.0)).collect();
    let dist =
        WeightedIndex::new(&weights).map_err(|e| SimError::InvalidState(format!("diagonal not samplable: {e}")))?;
    let mut rng = seed::rng(seed);
    let mut tallies = vec![0u64; rho.dim()];
    for _ in 0..shots {
        let truth = dist.sample(&mut rng);
        let mut reported = truth;
        for (q, conf) in confusions.iter().enumerate() {
            let mask = 1 << (m - 1 - q);
            let bit = usize::from(truth & mask != 0);
            if rng.random::<f64>() < conf.flip_probability(bit) {
                reported ^= mask;
            }
        }
        tallies[reported] += 1;
    }
    Ok(tallies
        .into_iter()
        .enumerate()
        .filter(|(_, n)| *n > 0)
        .map(|(b, n)| (format!("{b:0m$b}"), n))
        .collect())
}

/// Per-gate noise of a twin, compiled to superoperators.
#[derive(Debug, Clone)]
struct NoiseModel {
    /// `[qubit][kind]` post-gate channel for RY, RZ, X (`None` = identity).
    one_qubit: Vec<[Option<CMatrix>; 3]>,
    /// Per-qubit thermal relaxation over the two-qubit gate duration.
    two_qubit_thermal: Vec<Option<CMatrix>>,
    two_qubit_depolarizing: Option<CMatrix>,
}

fn one_qubit_kind_index(kind: GateKind) -> usize {
    match kind {
        GateKind::RY => 0,
        GateKind::RZ => 1,
        GateKind::X => 2,
        GateKind::CX => unreachable!("two-qubit gate"),
    }
}

/// Calibrated gate names tried, in order, for each single-qubit kind.
/// RY and X fall back to the device's `sx` pulse.
fn calibration_names(kind: GateKind) -> &'static [&'static str] {
    match kind {
        GateKind::RY => &["ry", "sx"],
        GateKind::RZ => &["rz"],
        GateKind::X => &["x", "sx"],
        GateKind::CX => &[],
    }
}

fn nontrivial(ch: noise::KrausChannel) -> Option<CMatrix> {
    (!ch.is_identity()).then(|| ch.superoperator())
}

impl NoiseModel {
    fn from_twin(twin: &QuantumDigitalTwin) -> Result<Self> {
        let mut one_qubit = Vec::with_capacity(twin.register_size);
        let mut two_qubit_thermal = Vec::with_capacity(twin.register_size);
        let two = twin.two_qubit_gate.as_ref().map(|g| g.noise).unwrap_or_default();
        for q in &twin.qubits {
            let mut per_kind: [Option<CMatrix>; 3] = [None, None, None];
            for kind in [GateKind::RY, GateKind::RZ, GateKind::X] {
                let g: GateNoise = calibration_names(kind)
                    .iter()
                    .find_map(|n| twin.one_qubit_gates.get(*n).copied())
                    .unwrap_or_default();
                let thermal = noise::thermal_relaxation(q.t1_us, q.t2_us, g.duration_ns)?;
                let ch = noise::compose(&thermal, &noise::depolarizing(g.error, 1)?)?;
                per_kind[one_qubit_kind_index(kind)] = nontrivial(ch);
            }
            one_qubit.push(per_kind);
            two_qubit_thermal.push(nontrivial(noise::thermal_relaxation(
                q.t1_us,
                q.t2_us,
                two.duration_ns,
            )?));
        }
        Ok(Self {
            one_qubit,
            two_qubit_thermal,
            two_qubit_depolarizing: nontrivial(noise::depolarizing(two.error, 2)?),
        })
    }

    fn apply_after(&self, gate: &Gate, rho: &mut DensityMatrix, validate: bool) -> Result<()> {
        let step = |rho: &DensityMatrix| {
            if validate {
                rho.check_trace_and_hermiticity()
            } else {
                Ok(())
            }
        };
        if gate.kind == GateKind::CX {
            for &q in &gate.qubits {
                if let Some(s) = &self.two_qubit_thermal[q] {
                    rho.apply_superoperator(s, &[q]);
                    step(rho)?;
                }
            }
            if let Some(s) = &self.two_qubit_depolarizing {
                rho.apply_superoperator(s, &gate.qubits);
                step(rho)?;
            }
        } else if let Some(s) = &self.one_qubit[gate.qubits[0]][one_qubit_kind_index(gate.kind)] {
            rho.apply_superoperator(s, &gate.qubits);
            step(rho)?;
        }
        Ok(())
    }
}

/// A reusable engine for one register, optionally bound to a twin's noise.
#[derive(Debug, Clone)]
pub struct Simulator {
    register_size: usize,
    noise: Option<NoiseModel>,
    validate_steps: bool,
}

impl Simulator {
    pub fn noiseless(register_size: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&register_size) {
            return Err(SimError::RegisterSize(register_size));
        }
        Ok(Self {
            register_size,
            noise: None,
            validate_steps: false,
        })
    }

    pub fn for_twin(twin: &QuantumDigitalTwin) -> Result<Self> {
        let mut sim = Self::noiseless(twin.register_size)?;
        sim.noise = Some(NoiseModel::from_twin(twin)?);
        Ok(sim)
    }

    pub fn new(register_size: usize, twin: Option<&QuantumDigitalTwin>) -> Result<Self> {
        match twin {
            Some(t) if t.register_size != register_size => Err(SimError::SizeMismatch {
                circuit: register_size,
                twin: t.register_size,
            }),
            Some(t) => Self::for_twin(t),
            None => Self::noiseless(register_size),
        }
    }

    /// Check trace and Hermiticity after every gate and channel.
    pub fn with_step_validation(mut self, on: bool) -> Self {
        self.validate_steps = on;
        self
    }

    pub fn register_size(&self) -> usize {
        self.register_size
    }

    pub fn run(&self, circuit: &Circuit) -> Result<DensityMatrix> {
        if circuit.register_size != self.register_size {
            return Err(SimError::SizeMismatch {
                circuit: circuit.register_size,
                twin: self.register_size,
            });
        }
        if let Some(slot) = circuit.slots.keys().next() {
            return Err(SimError::UnboundSlot(*slot));
        }
        let mut rho = DensityMatrix::ground(self.register_size)?;
        for gate in &circuit.gates {
            rho.apply_unitary(&gate.unitary()?, &gate.qubits);
            if self.validate_steps {
                rho.check_trace_and_hermiticity()?;
            }
            if let Some(noise) = &self.noise {
                noise.apply_after(gate, &mut rho, self.validate_steps)?;
            }
        }
        Ok(rho)
    }
}

/// Runs a fully bound circuit from `|0...0>`, with the twin's noise if given.
pub fn run_density(circuit: &Circuit, twin: Option<&QuantumDigitalTwin>) -> Result<DensityMatrix> {
    Simulator::new(circuit.register_size, twin)?.run(circuit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::readout_confusion;
    use std::f64::consts::PI;

    fn twin_1q(x_noise: GateNoise, t1: f64, t2: f64) -> QuantumDigitalTwin {
        let mut twin = QuantumDigitalTwin::uniform(
            1,
            t1,
            t2,
            ConfusionMatrix::IDENTITY,
            GateNoise::default(),
            GateNoise::default(),
        )
        .unwrap();
        twin.one_qubit_gates.insert("x".into(), x_noise);
        twin
    }

    #[test]
    fn empty_circuit_is_ground_projector() {
        let rho = run_density(&Circuit::new(3).unwrap(), None).unwrap();
        assert_eq!(rho, DensityMatrix::ground(3).unwrap());
    }

    #[test]
    fn embedding_examples() {
        let z = expectation_z(&run_density(&build_embedding_circuit(3, &[0.0; 3]).unwrap(), None).unwrap());
        assert_eq!(z, vec![1.0; 3]);
        let z = expectation_z(&run_density(&build_embedding_circuit(1, &[PI]).unwrap(), None).unwrap());
        assert!((z[0] + 1.0).abs() < 1e-15);
        let z = expectation_z(&run_density(&build_embedding_circuit(1, &[PI / 3.0]).unwrap(), None).unwrap());
        assert!((z[0] - 0.5).abs() < 1e-15);
        assert_eq!(
            build_embedding_circuit(2, &[0.0]),
            Err(SimError::Length { expected: 2, got: 1 })
        );
    }

    #[test]
    fn variational_layer_shapes() {
        let slots = [SlotId(0), SlotId(1), SlotId(2)];
        let c = build_variational_layer(3, &slots, false).unwrap();
        assert_eq!(c.gates().len(), 3);
        assert!(c
            .gates()
            .iter()
            .all(|g| g.kind == GateKind::RY && matches!(g.param, Some(Param::Slot(_)))));
        let c = build_variational_layer(2, &slots[..2], true).unwrap();
        assert_eq!(c.gates().len(), 4);
        assert_eq!(
            build_variational_layer(2, &[SlotId(1), SlotId(1)], false),
            Err(SimError::DuplicateSlot(SlotId(1)))
        );
    }

    #[test]
    fn bound_zero_slot_is_identity() {
        let c = build_variational_layer(1, &[SlotId(4)], false).unwrap();
        assert_eq!(run_density(&c, None), Err(SimError::UnboundSlot(SlotId(4))));
        let bound = c.bind(&BTreeMap::from([(SlotId(4), 0.0)])).unwrap();
        assert_eq!(run_density(&bound, None).unwrap(), DensityMatrix::ground(1).unwrap());
    }

    #[test]
    fn gate_validation() {
        let mut c = Circuit::new(2).unwrap();
        assert!(matches!(c.push(Gate::x(2)), Err(SimError::QubitOutOfRange { .. })));
        assert!(matches!(c.push(Gate::cx(1, 1)), Err(SimError::RepeatedQubit(_))));
        let bad = Gate {
            kind: GateKind::RY,
            qubits: vec![0],
            param: None,
        };
        assert!(matches!(c.push(bad), Err(SimError::Parameter(_))));
        assert_eq!(Circuit::new(11), Err(SimError::RegisterSize(11)));
    }

    #[test]
    fn thermal_decay_through_x() {
        let twin = twin_1q(
            GateNoise {
                duration_ns: 100_000.0,
                error: 0.0,
            },
            100.0,
            200.0,
        );
        let mut c = Circuit::new(1).unwrap();
        c.push(Gate::x(0)).unwrap();
        let rho = run_density(&c, Some(&twin)).unwrap();
        assert!((rho.matrix()[[1, 1]].re - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_twin_is_bitwise_noiseless() {
        let twin = QuantumDigitalTwin::uniform(
            3,
            50.0,
            70.0,
            ConfusionMatrix::IDENTITY,
            GateNoise::default(),
            GateNoise::default(),
        )
        .unwrap();
        let mut c = Circuit::new(3).unwrap();
        c.push(Gate::ry(0, 0.3))
            .unwrap()
            .push(Gate::cx(0, 2))
            .unwrap()
            .push(Gate::rz(1, 1.1))
            .unwrap()
            .push(Gate::x(2))
            .unwrap();
        assert_eq!(run_density(&c, Some(&twin)).unwrap(), run_density(&c, None).unwrap());
    }

    #[test]
    fn size_mismatch() {
        let twin = QuantumDigitalTwin::uniform(
            2,
            50.0,
            70.0,
            ConfusionMatrix::IDENTITY,
            GateNoise::default(),
            GateNoise::default(),
        )
        .unwrap();
        assert_eq!(
            run_density(&Circuit::new(3).unwrap(), Some(&twin)),
            Err(SimError::SizeMismatch { circuit: 3, twin: 2 })
        );
    }

    #[test]
    fn noisy_runs_stay_valid() {
        let twin = QuantumDigitalTwin::uniform(
            3,
            30.0,
            45.0,
            readout_confusion(0.02, 0.03).unwrap(),
            GateNoise {
                duration_ns: 400.0,
                error: 0.01,
            },
            GateNoise {
                duration_ns: 2000.0,
                error: 0.05,
            },
        )
        .unwrap();
        let mut c = Circuit::new(3).unwrap();
        for layer in 0..4 {
            for q in 0..3 {
                c.push(Gate::ry(q, 0.4 * (layer + q) as f64)).unwrap();
            }
            c.push(Gate::cx(layer % 3, (layer + 1) % 3)).unwrap();
        }
        let sim = Simulator::for_twin(&twin).unwrap().with_step_validation(true);
        let rho = sim.run(&c).unwrap();
        rho.validate().unwrap();
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(expectation_z(&DensityMatrix::ground(2).unwrap()), vec![1.0, 1.0]);
        assert_eq!(expectation_z(&DensityMatrix::maximally_mixed(3).unwrap()), vec![0.0; 3]);
        let mut c = Circuit::new(2).unwrap();
        c.push(Gate::ry(0, PI / 3.0)).unwrap();
        let z = expectation_z(&run_density(&c, None).unwrap());
        assert!((z[0] - 0.5).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_deterministic_and_exact_totals() {
        let rho = DensityMatrix::ground(1).unwrap();
        let counts = sample_counts(&rho, 1000, &[ConfusionMatrix::IDENTITY], 3).unwrap();
        assert_eq!(counts, BTreeMap::from([("0".to_string(), 1000)]));
        let mixed = DensityMatrix::maximally_mixed(2).unwrap();
        let conf = [readout_confusion(0.1, 0.2).unwrap(); 2];
        let a = sample_counts(&mixed, 777, &conf, 9).unwrap();
        assert_eq!(a.values().sum::<u64>(), 777);
        assert_eq!(a, sample_counts(&mixed, 777, &conf, 9).unwrap());
        assert_eq!(
            sample_counts(&rho, 0, &[ConfusionMatrix::IDENTITY], 1),
            Err(SimError::ZeroShots)
        );
    }

    #[test]
    fn sampling_statistics() {
        let n = 100_000u64;
        let ground = DensityMatrix::ground(1).unwrap();
        let counts = sample_counts(&ground, n, &[readout_confusion(0.1, 0.0).unwrap()], 5).unwrap();
        let f = counts["1"] as f64 / n as f64;
        assert!((f - 0.1).abs() <= 3.0 * (0.1f64 * 0.9 / n as f64).sqrt());
        let mixed = DensityMatrix::maximally_mixed(1).unwrap();
        let counts = sample_counts(&mixed, n, &[ConfusionMatrix::IDENTITY], 6).unwrap();
        for key in ["0", "1"] {
            let f = counts[key] as f64 / n as f64;
            assert!((f - 0.5).abs() <= 3.0 * (0.25f64 / n as f64).sqrt());
        }
    }

    #[test]
    fn bitstring_order_is_qubit_zero_first() {
        let mut c = Circuit::new(3).unwrap();
        c.push(Gate::x(0)).unwrap();
        let rho = run_density(&c, None).unwrap();
        let counts = sample_counts(&rho, 10, &[ConfusionMatrix::IDENTITY; 3], 1).unwrap();
        assert_eq!(counts, BTreeMap::from([("100".to_string(), 10)]));
    }

    #[test]
    fn dump_lists_params_and_slots() {
        let mut c = Circuit::new(2).unwrap();
        c.push(Gate::ry(0, 0.5))
            .unwrap()
            .push(Gate::ry_slot(1, SlotId(3)))
            .unwrap()
            .push(Gate::cx(0, 1))
            .unwrap();
        assert_eq!(
            c.to_json(),
            r#"[{"kind":"ry","param":0.5,"qubits":[0]},{"kind":"ry","qubits":[1],"slot":3},{"kind":"cx","qubits":[0,1]}]"#
        );
    }
}
