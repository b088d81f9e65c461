// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Digital twins of faulty quantum processors.
//!
//! A twin is a small density-matrix simulator whose per-qubit and per-gate
//! noise parameters were resampled from a timestamped calibration snapshot of
//! a real backend. Several independent twins stand in for parallel devices,
//! and a deep ensemble of hybrid classical-quantum regressors trained across
//! them yields predictions with uncertainty bands.
//!
//! The pipeline, bottom up:
//!
//! - [`calibration`]: parse, validate, version and summarize snapshots.
//! - [`noise`]: CPTP channels built from T1/T2, gate error and readout data.
//! - [`twin`]: sample twins from a snapshot and replicate them.
//! - [`sim`]: circuits and the noisy density-matrix engine.
//! - [`hybrid`]: the MLP + quantum layer + linear head regressor.
//! - [`ensemble`]: parallel member training and band aggregation.
//!
//! The `book/` directory at the repository root walks through each stage;
//! its code listings are compiled and run as doc-tests of this crate.

pub mod calibration;
pub mod ensemble;
pub mod hybrid;
mod linalg;
pub mod noise;
pub mod seed;
pub mod sim;
pub mod twin;

pub use calibration::{
    CalibrationSnapshot, GateRecord, Histogram, Property, QubitRecord, SnapshotFormat, SnapshotKey, TimestampSelector,
};
pub use ensemble::{Ensemble, PredictionBand, UqReport};
pub use hybrid::{Dataset, HybridModel, LossMode, TrainConfig};
pub use noise::{ConfusionMatrix, CptpReport, KrausChannel};
pub use sim::{Circuit, DensityMatrix, Gate, GateKind};
pub use twin::QuantumDigitalTwin;

/// Dense complex matrix used for operators and density matrices.
pub use linalg::CMatrix;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/twins.md")]
    mod twins {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/hybrid.md")]
    mod hybrid {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
}
