// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Noise channels built from calibration parameters.
//!
//! Every channel is a list of Kraus operators `K_k` acting as
//! `rho -> sum_k K_k rho K_k^dagger`. Constructors produce CPTP channels;
//! [`KrausChannel::new`] accepts arbitrary operators so that
//! [`KrausChannel::validate_cptp`] can report on them.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, c, CMatrix, ZERO};

/// Entrywise tolerance on `sum_k K_k^dagger K_k - I`.
pub const CPTP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("t1 must be positive and finite, got {0} us")]
    T1(f64),
    #[error("t2 must be positive and finite, got {0} us")]
    T2(f64),
    #[error("duration must be non-negative and finite, got {0} ns")]
    Duration(f64),
    #[error("error rate must lie in [0, 1], got {0}")]
    ErrorRate(f64),
    #[error("probability `{name}` must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("channel arity must be 1 or 2, got {0}")]
    Arity(usize),
    #[error("cannot compose channels of arity {0} and {1}")]
    ArityMismatch(usize, usize),
    #[error("a channel needs at least one operator")]
    NoOperators,
    #[error("operator {index} has shape {shape:?}, expected {dim}x{dim}")]
    Shape {
        index: usize,
        shape: (usize, usize),
        dim: usize,
    },
}

type Result<T> = std::result::Result<T, NoiseError>;

#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    operators: Vec<CMatrix>,
    arity: usize,
}

/// Outcome of a completeness check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CptpReport {
    pub passed: bool,
    /// `max |(sum K^dagger K - I)_ij|`.
    pub residual: f64,
}

impl KrausChannel {
    /// Wraps operators without checking completeness.
    pub fn new(operators: Vec<CMatrix>, arity: usize) -> Result<Self> {
        if !matches!(arity, 1 | 2) {
            return Err(NoiseError::Arity(arity));
        }
        if operators.is_empty() {
            return Err(NoiseError::NoOperators);
        }
        let dim = 1 << arity;
        if let Some((index, op)) = operators.iter().enumerate().find(|(_, op)| op.dim() != (dim, dim)) {
            return Err(NoiseError::Shape {
                index,
                shape: op.dim(),
                dim,
            });
        }
        Ok(Self { operators, arity })
    }

    pub fn identity(arity: usize) -> Result<Self> {
        Self::new(vec![linalg::identity(1 << arity)], arity)
    }

    /// Drops operators that are exactly zero, keeping at least one.
    fn pruned(operators: Vec<CMatrix>, arity: usize) -> Self {
        let mut kept: Vec<CMatrix> = operators
            .iter()
            .filter(|op| op.iter().any(|z| *z != ZERO))
            .cloned()
            .collect();
        if kept.is_empty() {
            kept.push(operators.into_iter().next().expect("at least one operator"));
        }
        Self { operators: kept, arity }
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.operators
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn dim(&self) -> usize {
        1 << self.arity
    }

    /// True for the single-operator channel `{I}`, compared exactly.
    pub fn is_identity(&self) -> bool {
        self.operators.len() == 1 && self.operators[0] == linalg::identity(self.dim())
    }

    pub fn validate_cptp(&self) -> CptpReport {
        let d = self.dim();
        let mut sum = Array2::<Complex64>::zeros((d, d));
        for k in &self.operators {
            sum = sum + linalg::dagger(k).dot(k);
        }
        let residual = linalg::max_abs_diff(&sum, &linalg::identity(d));
        CptpReport {
            passed: residual <= CPTP_TOLERANCE,
            residual,
        }
    }

    /// Applies the channel to a `d x d` matrix on exactly the channel's qubits.
    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let d = self.dim();
        let mut out = Array2::<Complex64>::zeros((d, d));
        for k in &self.operators {
            out = out + k.dot(rho).dot(&linalg::dagger(k));
        }
        out
    }

    /// Superoperator `S` with `vec(E(rho))[i*d + j] = sum S[(i*d+j), (k*d+l)] rho[k][l]`,
    /// i.e. `S = sum_K K (x) conj(K)` in row-major vectorization.
    pub fn superoperator(&self) -> CMatrix {
        let d = self.dim();
        let mut s = Array2::<Complex64>::zeros((d * d, d * d));
        for op in &self.operators {
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        let a = op[[i, k]];
                        if a == ZERO {
                            continue;
                        }
                        for l in 0..d {
                            s[[i * d + j, k * d + l]] += a * op[[j, l]].conj();
                        }
                    }
                }
            }
        }
        s
    }

    /// Channel on `self.arity + other.arity` qubits acting as `self (x) other`,
    /// with `self` on the more significant qubits.
    pub fn tensor(&self, other: &Self) -> Result<Self> {
        let arity = self.arity + other.arity;
        if arity > 2 {
            return Err(NoiseError::Arity(arity));
        }
        let ops = self
            .operators
            .iter()
            .flat_map(|a| other.operators.iter().map(move |b| linalg::kron(a, b)))
            .collect();
        Ok(Self::pruned(ops, arity))
    }
}

/// Applies `first`, then `then`: operators `{B_j A_i}`.
pub fn compose(first: &KrausChannel, then: &KrausChannel) -> Result<KrausChannel> {
    if first.arity != then.arity {
        return Err(NoiseError::ArityMismatch(first.arity, then.arity));
    }
    let ops = then
        .operators
        .iter()
        .flat_map(|b| first.operators.iter().map(move |a| b.dot(a)))
        .collect();
    Ok(KrausChannel::pruned(ops, first.arity))
}

/// Clamps `t2` to the physical bound `2 * t1`, logging when it bites.
pub fn clamp_t2(t1_us: f64, t2_us: f64) -> f64 {
    if t2_us > 2.0 * t1_us {
        log::warn!("t2 = {t2_us} us exceeds 2*t1 = {} us; clamping", 2.0 * t1_us);
        2.0 * t1_us
    } else {
        t2_us
    }
}

/// Zero-temperature thermal relaxation over `duration_ns`.
///
/// With `gamma = 1 - exp(-t/T1)` the action on a qubit is
/// `rho00 += gamma*rho11`, `rho11 *= 1 - gamma`, `rho01 *= exp(-t/T2)`.
/// It is realized as amplitude damping followed by the extra pure dephasing
/// `f = exp(-t/T2 + t/(2*T1))`, folded into three operators.
pub fn thermal_relaxation(t1_us: f64, t2_us: f64, duration_ns: f64) -> Result<KrausChannel> {
    if !(t1_us.is_finite() && t1_us > 0.0) {
        return Err(NoiseError::T1(t1_us));
    }
    if !(t2_us.is_finite() && t2_us > 0.0) {
        return Err(NoiseError::T2(t2_us));
    }
    if !(duration_ns.is_finite() && duration_ns >= 0.0) {
        return Err(NoiseError::Duration(duration_ns));
    }
    let t2_us = clamp_t2(t1_us, t2_us);
    let t = duration_ns * 1e-3;
    let keep = (-t / t1_us).exp(); // 1 - gamma
    let gamma = -(-t / t1_us).exp_m1();
    let f = (t / (2.0 * t1_us) - t / t2_us).exp().min(1.0);
    let damp = keep.sqrt();
    let even = ((1.0 + f) / 2.0).sqrt();
    let odd = ((1.0 - f) / 2.0).sqrt();
    let ops = vec![
        linalg::from_rows([[c(even, 0.0), ZERO], [ZERO, c(even * damp, 0.0)]]),
        linalg::from_rows([[c(odd, 0.0), ZERO], [ZERO, c(-odd * damp, 0.0)]]),
        linalg::from_rows([[ZERO, c(gamma.sqrt(), 0.0)], [ZERO, ZERO]]),
    ];
    Ok(KrausChannel::pruned(ops, 1))
}

/// Depolarizing strength for an average gate infidelity:
/// `lambda = min(1, eps * d / (d - 1))`.
pub fn depolarizing_strength(error_rate: f64, arity: usize) -> f64 {
    let d = (1usize << arity) as f64;
    (error_rate * d / (d - 1.0)).min(1.0)
}

/// `rho -> (1 - lambda) rho + lambda I/d` as Pauli Kraus operators.
pub fn depolarizing(error_rate: f64, arity: usize) -> Result<KrausChannel> {
    if !matches!(arity, 1 | 2) {
        return Err(NoiseError::Arity(arity));
    }
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(NoiseError::ErrorRate(error_rate));
    }
    let lambda = depolarizing_strength(error_rate, arity);
    let d2 = (1usize << (2 * arity)) as f64;
    let paulis = linalg::paulis();
    let strings: Vec<CMatrix> = if arity == 1 {
        paulis.to_vec()
    } else {
        paulis
            .iter()
            .flat_map(|a| paulis.iter().map(move |b| linalg::kron(a, b)))
            .collect()
    };
    let ops = strings
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let weight = if i == 0 {
                1.0 - lambda * (d2 - 1.0) / d2
            } else {
                lambda / d2
            };
            p.mapv(|z| z * weight.max(0.0).sqrt())
        })
        .collect();
    Ok(KrausChannel::pruned(ops, arity))
}

/// Readout confusion matrix, indexed `p[reported][prepared]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub p: [[f64; 2]; 2],
}

impl ConfusionMatrix {
    pub const IDENTITY: Self = Self {
        p: [[1.0, 0.0], [0.0, 1.0]],
    };

    /// Probability that a qubit prepared in `prepared` is reported flipped.
    pub fn flip_probability(&self, prepared: usize) -> f64 {
        self.p[1 - prepared][prepared]
    }

    pub fn prob_meas1_prep0(&self) -> f64 {
        self.p[1][0]
    }

    pub fn prob_meas0_prep1(&self) -> f64 {
        self.p[0][1]
    }
}

pub fn readout_confusion(prob_meas1_prep0: f64, prob_meas0_prep1: f64) -> Result<ConfusionMatrix> {
    for (name, value) in [
        ("prob_meas1_prep0", prob_meas1_prep0),
        ("prob_meas0_prep1", prob_meas0_prep1),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(NoiseError::Probability { name, value });
        }
    }
    Ok(ConfusionMatrix {
        p: [
            [1.0 - prob_meas1_prep0, prob_meas0_prep1],
            [prob_meas1_prep0, 1.0 - prob_meas0_prep1],
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ONE;
    use proptest::prelude::*;

    fn projector1() -> CMatrix {
        linalg::from_rows([[ZERO, ZERO], [ZERO, ONE]])
    }

    fn plus_state() -> CMatrix {
        linalg::from_rows([[c(0.5, 0.0), c(0.5, 0.0)], [c(0.5, 0.0), c(0.5, 0.0)]])
    }

    /// Random pure-state density matrix of dimension `d` from a seed.
    fn random_state(d: usize, seed: u64) -> CMatrix {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let v: Vec<Complex64> = (0..d)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        Array2::from_shape_fn((d, d), |(i, j)| v[i] * v[j].conj() / norm)
    }

    #[test]
    fn zero_duration_is_identity() {
        let ch = thermal_relaxation(50.0, 30.0, 0.0).unwrap();
        assert!(ch.is_identity());
        let rho = plus_state();
        assert_eq!(ch.apply(&rho), rho);
    }

    #[test]
    fn long_lifetimes_approach_identity() {
        let ch = thermal_relaxation(1e12, 1e12, 100.0).unwrap();
        for seed in 0..5 {
            let rho = random_state(2, seed);
            assert!(linalg::max_abs_diff(&ch.apply(&rho), &rho) < 1e-9);
        }
    }

    #[test]
    fn thermal_decay_of_excited_state() {
        let ch = thermal_relaxation(100.0, 80.0, 100_000.0).unwrap();
        let out = ch.apply(&projector1());
        assert!((out[[1, 1]].re - (-1.0f64).exp()).abs() < 1e-12);
        assert!((out[[0, 0]].re - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn thermal_coherence_decay() {
        let ch = thermal_relaxation(100.0, 80.0, 40_000.0).unwrap();
        let out = ch.apply(&plus_state());
        assert!((out[[0, 1]].re - 0.5 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn t2_clamped_to_twice_t1() {
        let clamped = thermal_relaxation(10.0, 50.0, 1000.0).unwrap();
        let bound = thermal_relaxation(10.0, 20.0, 1000.0).unwrap();
        assert_eq!(clamped, bound);
        assert!(clamped.validate_cptp().passed);
    }

    #[test]
    fn thermal_rejects_bad_parameters() {
        assert_eq!(thermal_relaxation(0.0, 1.0, 1.0), Err(NoiseError::T1(0.0)));
        assert_eq!(thermal_relaxation(1.0, -1.0, 1.0), Err(NoiseError::T2(-1.0)));
        assert_eq!(thermal_relaxation(1.0, 1.0, -1.0), Err(NoiseError::Duration(-1.0)));
    }

    #[test]
    fn depolarizing_zero_is_identity() {
        assert!(depolarizing(0.0, 1).unwrap().is_identity());
        assert!(depolarizing(0.0, 2).unwrap().is_identity());
    }

    #[test]
    fn depolarizing_half_error_fully_mixes_one_qubit() {
        let ch = depolarizing(0.5, 1).unwrap();
        for seed in 0..5 {
            let out = ch.apply(&random_state(2, seed));
            assert!(linalg::max_abs_diff(&out, &linalg::identity(2).mapv(|z| z * 0.5)) < 1e-15);
        }
    }

    #[test]
    fn depolarizing_small_error_z_expectation() {
        let ch = depolarizing(0.001, 1).unwrap();
        let ground = linalg::from_rows([[ONE, ZERO], [ZERO, ZERO]]);
        let out = ch.apply(&ground);
        let z = out[[0, 0]].re - out[[1, 1]].re;
        assert!((z - 0.998).abs() < 1e-12);
    }

    #[test]
    fn depolarizing_rejects_out_of_range() {
        assert_eq!(depolarizing(1.5, 1), Err(NoiseError::ErrorRate(1.5)));
        assert_eq!(depolarizing(0.1, 3), Err(NoiseError::Arity(3)));
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(readout_confusion(0.0, 0.0).unwrap(), ConfusionMatrix::IDENTITY);
        assert_eq!(readout_confusion(0.02, 0.05).unwrap().p, [[0.98, 0.05], [0.02, 0.95]]);
        assert_eq!(readout_confusion(1.0, 1.0).unwrap().p, [[0.0, 1.0], [1.0, 0.0]]);
        assert!(readout_confusion(-0.1, 0.0).is_err());
    }

    #[test]
    fn validate_reports() {
        let id = KrausChannel::identity(1).unwrap();
        assert_eq!(
            id.validate_cptp(),
            CptpReport {
                passed: true,
                residual: 0.0
            }
        );
        let doubled = KrausChannel::new(vec![linalg::identity(2).mapv(|z| z * 2.0)], 1).unwrap();
        let report = doubled.validate_cptp();
        assert!(!report.passed);
        assert_eq!(report.residual, 3.0);
    }

    #[test]
    fn new_checks_shapes() {
        assert_eq!(KrausChannel::new(vec![], 1), Err(NoiseError::NoOperators));
        assert!(matches!(
            KrausChannel::new(vec![linalg::identity(2)], 2),
            Err(NoiseError::Shape { .. })
        ));
    }

    #[test]
    fn compose_with_identity() {
        let th = thermal_relaxation(30.0, 20.0, 5000.0).unwrap();
        let composed = compose(&KrausChannel::identity(1).unwrap(), &th).unwrap();
        for seed in 0..4 {
            let rho = random_state(2, seed);
            assert!(linalg::max_abs_diff(&composed.apply(&rho), &th.apply(&rho)) < 1e-15);
        }
        assert_eq!(
            compose(&th, &KrausChannel::identity(2).unwrap()),
            Err(NoiseError::ArityMismatch(1, 2))
        );
    }

    #[test]
    fn compose_full_depolarizing_after_unital() {
        let unital = depolarizing(0.1, 2).unwrap();
        let full = depolarizing(0.75, 2).unwrap();
        let ch = compose(&unital, &full).unwrap();
        let mixed = linalg::identity(4).mapv(|z| z * 0.25);
        for seed in 0..10 {
            assert!(linalg::max_abs_diff(&ch.apply(&random_state(4, seed)), &mixed) < 1e-14);
        }
    }

    #[test]
    fn compose_thermal_semigroup() {
        let (t1, t2, t) = (70.0, 90.0, 25_000.0);
        let once = thermal_relaxation(t1, t2, t).unwrap();
        let twice = compose(&once, &once).unwrap();
        let direct = thermal_relaxation(t1, t2, 2.0 * t).unwrap();
        let out = twice.apply(&projector1());
        assert!((out[[1, 1]].re - (-2.0 * t * 1e-3 / t1).exp()).abs() < 1e-12);
        for seed in 0..5 {
            let rho = random_state(2, seed);
            assert!(linalg::max_abs_diff(&twice.apply(&rho), &direct.apply(&rho)) < 1e-10);
        }
    }

    #[test]
    fn superoperator_matches_kraus_action() {
        let ch = compose(
            &thermal_relaxation(40.0, 30.0, 9000.0).unwrap(),
            &depolarizing(0.02, 1).unwrap(),
        )
        .unwrap();
        let s = ch.superoperator();
        let rho = random_state(2, 11);
        let v = Array2::from_shape_vec((4, 1), rho.iter().copied().collect()).unwrap();
        let out = s.dot(&v).into_shape_with_order((2, 2)).unwrap();
        assert!(linalg::max_abs_diff(&out, &ch.apply(&rho)) < 1e-15);
    }

    #[test]
    fn tensor_of_thermals() {
        let a = thermal_relaxation(40.0, 30.0, 9000.0).unwrap();
        let b = thermal_relaxation(60.0, 70.0, 9000.0).unwrap();
        let ab = a.tensor(&b).unwrap();
        assert_eq!(ab.arity(), 2);
        assert!(ab.validate_cptp().passed);
        let rho = linalg::kron(&random_state(2, 1), &random_state(2, 2));
        let expect = linalg::kron(&a.apply(&random_state(2, 1)), &b.apply(&random_state(2, 2)));
        assert!(linalg::max_abs_diff(&ab.apply(&rho), &expect) < 1e-15);
    }

    proptest! {
        #[test]
        fn constructed_channels_are_cptp(
            t1 in 1.0f64..500.0,
            ratio in 0.01f64..2.0,
            duration in 0.0f64..1e6,
            eps in 0.0f64..=1.0,
            arity in 1usize..=2,
            seed in any::<u64>(),
        ) {
            let th = thermal_relaxation(t1, t1 * ratio, duration).unwrap();
            let dep = depolarizing(eps, arity).unwrap();
            prop_assert!(th.validate_cptp().passed);
            prop_assert!(dep.validate_cptp().passed);
            let rho = random_state(2, seed);
            let out = th.apply(&rho);
            let trace = out[[0, 0]] + out[[1, 1]];
            prop_assert!((trace.re - 1.0).abs() <= 1e-10);
            prop_assert!(linalg::min_eigenvalue(&out) >= -1e-9);
            let rho = random_state(1 << arity, seed);
            let out = dep.apply(&rho);
            // Depolarizing noise only shrinks |<Z>| on the first qubit.
            let d = 1 << arity;
            let z = |m: &CMatrix| (0..d).map(|i| if i < d / 2 { m[[i, i]].re } else { -m[[i, i]].re }).sum::<f64>();
            prop_assert!(z(&out).abs() <= z(&rho).abs() + 1e-12);
        }

        #[test]
        fn confusion_columns_stochastic(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let m = readout_confusion(a, b).unwrap();
            for prepared in 0..2 {
                prop_assert!((m.p[0][prepared] + m.p[1][prepared] - 1.0).abs() <= 1e-12);
            }
        }
    }
}
