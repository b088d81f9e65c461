// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! The hybrid classical-quantum regressor.
//!
//! ```text
//! x -> x / x_scale -> tanh(W1 . + b1) -> tanh(W2 . + b2) -> W3 . + b3 = a   (m outputs)
//!   -> angles = angle_scale * a
//!   -> quantum layer: RY(angle_i) then RY(theta_i) on qubit i, [CX ring]
//!   -> z_i = <Z_i>
//!   -> head: h = Wh z + bh ;  mean = y_scale * h_0 ;  variance = y_scale^2 exp(h_1)
//! ```
//!
//! Quantum-layer derivatives come from the parameter-shift rule, which is
//! exact for RY gates even with the twin's parameter-independent noise
//! channels between them. Everything else is ordinary backpropagation.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::sim::{self, Circuit, SimError, Simulator, SlotId};
use crate::twin::{QuantumDigitalTwin, TwinSource};

/// Variance floor in gaussian-nll mode.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum HybridError {
    #[error("dataset needs at least one point")]
    EmptyDataset,
    #[error("domain [{0}, {1}] is empty")]
    Domain(f64, f64),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    NoiseSigma(f64),
    #[error("inputs and targets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss mode {0:?} needs a head with at least {1} outputs")]
    HeadTooSmall(LossMode, usize),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

type Result<T> = std::result::Result<T, HybridError>;

/// The synthetic ground truth `y = x^3`.
pub fn cubic(x: f64) -> f64 {
    x * x * x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetGenerator {
    pub n_points: usize,
    pub domain: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub x_scale: f64,
    pub y_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<DatasetGenerator>,
}

fn max_abs_or_one(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

impl Dataset {
    /// Normalization scales are `max|x|` and `max|y|` (1 when all zero).
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(HybridError::LengthMismatch(x.len(), y.len()));
        }
        if x.is_empty() {
            return Err(HybridError::EmptyDataset);
        }
        if let Some(bad) = x.iter().chain(&y).find(|v| !v.is_finite()) {
            return Err(HybridError::NonFinite(*bad));
        }
        Ok(Self {
            x_scale: max_abs_or_one(&x),
            y_scale: max_abs_or_one(&y),
            x,
            y,
            generator: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `x,y` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.x.iter().zip(&self.y) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }

    /// Normalization and generator settings, written next to the CSV.
    pub fn sidecar_json(&self) -> String {
        let v = serde_json::json!({
            "x_scale": self.x_scale,
            "y_scale": self.y_scale,
            "generator": self.generator,
        });
        serde_json::to_string_pretty(&v).expect("sidecar serialization cannot fail") + "\n"
    }
}

/// `n` points with `x ~ U[a, b]` and `y = x^3 + N(0, sigma^2)`.
pub fn generate_dataset(n: usize, domain: (f64, f64), noise_sigma: f64, seed: u64) -> Result<Dataset> {
    let (a, b) = domain;
    if n == 0 {
        return Err(HybridError::EmptyDataset);
    }
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(HybridError::Domain(a, b));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(HybridError::NoiseSigma(noise_sigma));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|_| HybridError::NoiseSigma(noise_sigma))?;
    let mut rng = seed::rng(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = rng.random_range(a..b);
        x.push(xi);
        y.push(cubic(xi) + normal.sample(&mut rng));
    }
    let mut data = Dataset::new(x, y)?;
    data.generator = Some(DatasetGenerator {
        n_points: n,
        domain,
        noise_sigma,
        seed,
    });
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum LossMode {
    #[default]
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "gaussian-nll")]
    GaussianNll,
}

impl LossMode {
    pub fn head_outputs(self) -> usize {
        match self {
            Self::Mse => 1,
            Self::GaussianNll => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossMode,
    /// Initialization seed when a model is built for training.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossMode::Mse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HybridError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden: usize,
    pub register_size: usize,
    pub entangle: bool,
    pub angle_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 100,
            register_size: 3,
            entangle: false,
            angle_scale: PI,
        }
    }
}

/// Every trainable array, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub thetas: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl Parameters {
    fn zeros_like(other: &Self) -> Self {
        Self {
            w1: Array2::zeros(other.w1.dim()),
            b1: Array1::zeros(other.b1.len()),
            w2: Array2::zeros(other.w2.dim()),
            b2: Array1::zeros(other.b2.len()),
            w3: Array2::zeros(other.w3.dim()),
            b3: Array1::zeros(other.b3.len()),
            thetas: Array1::zeros(other.thetas.len()),
            head_w: Array2::zeros(other.head_w.dim()),
            head_b: Array1::zeros(other.head_b.len()),
        }
    }

    fn slices(&self) -> [&[f64]; 9] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.thetas.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.thetas.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation in declaration order, each array row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.len();
        if flat.len() != expected {
            return Err(HybridError::ParameterCount {
                expected,
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub architecture: Architecture,
    pub params: Parameters,
    pub x_scale: f64,
    pub y_scale: f64,
}

fn uniform_array2<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn uniform_array1<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.random_range(-bound..bound))
}

impl HybridModel {
    /// Layers drawn uniformly in `+-1/sqrt(fan_in)`, thetas in `[-pi, pi)`.
    pub fn init(architecture: Architecture, loss: LossMode, dataset: &Dataset, seed: u64) -> Self {
        let Architecture {
            hidden,
            register_size: m,
            ..
        } = architecture;
        let k = loss.head_outputs();
        let mut rng = seed::rng(seed);
        let b_in = 1.0;
        let b_hidden = 1.0 / (hidden as f64).sqrt();
        let b_head = 1.0 / (m as f64).sqrt();
        let params = Parameters {
            w1: uniform_array2(&mut rng, hidden, 1, b_in),
            b1: uniform_array1(&mut rng, hidden, b_in),
            w2: uniform_array2(&mut rng, hidden, hidden, b_hidden),
            b2: uniform_array1(&mut rng, hidden, b_hidden),
            w3: uniform_array2(&mut rng, m, hidden, b_hidden),
            b3: uniform_array1(&mut rng, m, b_hidden),
            thetas: uniform_array1(&mut rng, m, PI),
            head_w: uniform_array2(&mut rng, k, m, b_head),
            head_b: uniform_array1(&mut rng, k, b_head),
        };
        Self {
            architecture,
            params,
            x_scale: dataset.x_scale,
            y_scale: dataset.y_scale,
        }
    }

    /// A model with every parameter zero.
    pub fn zeros(architecture: Architecture, loss: LossMode, x_scale: f64, y_scale: f64) -> Self {
        let (h, m, k) = (architecture.hidden, architecture.register_size, loss.head_outputs());
        Self {
            architecture,
            params: Parameters {
                w1: Array2::zeros((h, 1)),
                b1: Array1::zeros(h),
                w2: Array2::zeros((h, h)),
                b2: Array1::zeros(h),
                w3: Array2::zeros((m, h)),
                b3: Array1::zeros(m),
                thetas: Array1::zeros(m),
                head_w: Array2::zeros((k, m)),
                head_b: Array1::zeros(k),
            },
            x_scale,
            y_scale,
        }
    }

    pub fn head_outputs(&self) -> usize {
        self.params.head_b.len()
    }

    /// Classical front end: `(h1, h2, a)` for one input.
    fn front(&self, x: f64) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let p = &self.params;
        let u = x / self.x_scale;
        let h1 = (p.w1.column(0).mapv(|w| w * u) + &p.b1).mapv(f64::tanh);
        let h2 = (p.w2.dot(&h1) + &p.b2).mapv(f64::tanh);
        let a = p.w3.dot(&h2) + &p.b3;
        (h1, h2, a)
    }
}

/// The quantum layer bound to one simulator (and so to one twin).
#[derive(Debug, Clone)]
pub struct QuantumLayer {
    sim: Simulator,
    entangle: bool,
}

impl QuantumLayer {
    pub fn new(register_size: usize, entangle: bool, twin: Option<&QuantumDigitalTwin>) -> Result<Self> {
        Ok(Self {
            sim: Simulator::new(register_size, twin)?,
            entangle,
        })
    }

    pub fn for_model(model: &HybridModel, twin: Option<&QuantumDigitalTwin>) -> Result<Self> {
        Self::new(model.architecture.register_size, model.architecture.entangle, twin)
    }

    pub fn register_size(&self) -> usize {
        self.sim.register_size()
    }

    pub fn circuit(&self, angles: &[f64], thetas: &[f64]) -> Result<Circuit> {
        let m = self.register_size();
        let slots: Vec<SlotId> = (0..m as u32).map(SlotId).collect();
        let mut circuit = sim::build_embedding_circuit(m, angles)?;
        circuit.extend(&sim::build_variational_layer(m, &slots, self.entangle)?)?;
        if thetas.len() != m {
            return Err(SimError::Length {
                expected: m,
                got: thetas.len(),
            }
            .into());
        }
        let values: BTreeMap<SlotId, f64> = slots.into_iter().zip(thetas.iter().copied()).collect();
        Ok(circuit.bind(&values)?)
    }

    /// `<Z_i>` after embedding `angles` and rotating by `thetas`.
    pub fn expectations(&self, angles: &[f64], thetas: &[f64]) -> Result<Vec<f64>> {
        let rho = self.sim.run(&self.circuit(angles, thetas)?)?;
        Ok(sim::expectation_z(&rho))
    }
}

/// Outputs and parameter-shift Jacobians of the quantum layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumJacobian {
    pub z: Vec<f64>,
    /// `[k][j] = dz_k / d angle_j`.
    pub d_angles: Array2<f64>,
    /// `[k][j] = dz_k / d theta_j`.
    pub d_thetas: Array2<f64>,
}

/// Each partial is `[z(p + pi/2) - z(p - pi/2)] / 2`, from two full layer
/// executions per parameter, assembled in parameter-index order.
pub fn quantum_gradient(layer: &QuantumLayer, angles: &[f64], thetas: &[f64]) -> Result<QuantumJacobian> {
    let m = layer.register_size();
    let z = layer.expectations(angles, thetas)?;
    let mut d_angles = Array2::zeros((m, m));
    let mut d_thetas = Array2::zeros((m, m));
    for (target, jac) in [(0usize, &mut d_angles), (1, &mut d_thetas)] {
        for j in 0..m {
            let mut plus = [angles.to_vec(), thetas.to_vec()];
            let mut minus = plus.clone();
            plus[target][j] += FRAC_PI_2;
            minus[target][j] -= FRAC_PI_2;
            let zp = layer.expectations(&plus[0], &plus[1])?;
            let zm = layer.expectations(&minus[0], &minus[1])?;
            for k in 0..m {
                jac[[k, j]] = (zp[k] - zm[k]) / 2.0;
            }
        }
    }
    Ok(QuantumJacobian { z, d_angles, d_thetas })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    /// Present for heads with a variance output.
    pub variance: Option<f64>,
}

fn variance_of(h1: f64, y_scale: f64) -> (f64, bool) {
    let raw = y_scale * y_scale * h1.exp();
    if raw > VARIANCE_FLOOR {
        (raw, false)
    } else {
        (VARIANCE_FLOOR, true)
    }
}

/// Evaluates the model on one input through `layer`.
pub fn forward(model: &HybridModel, x: f64, layer: &QuantumLayer) -> Result<Prediction> {
    if !x.is_finite() {
        return Err(HybridError::NonFinite(x));
    }
    let (_, _, a) = model.front(x);
    let angles: Vec<f64> = a.iter().map(|v| v * model.architecture.angle_scale).collect();
    let z = Array1::from(layer.expectations(&angles, model.params.thetas.as_slice().expect("standard layout"))?);
    let h = model.params.head_w.dot(&z) + &model.params.head_b;
    Ok(Prediction {
        mean: model.y_scale * h[0],
        variance: (h.len() > 1).then(|| variance_of(h[1], model.y_scale).0),
    })
}

/// Convenience wrapper building the layer from an optional twin.
pub fn predict(model: &HybridModel, x: f64, twin: Option<&QuantumDigitalTwin>) -> Result<Prediction> {
    forward(model, x, &QuantumLayer::for_model(model, twin)?)
}

/// Mean loss over the batch and its gradient with respect to every
/// parameter. MSE uses the first head output only.
pub fn loss_and_gradients(
    model: &HybridModel,
    xs: &[f64],
    ys: &[f64],
    layer: &QuantumLayer,
    mode: LossMode,
) -> Result<(f64, Parameters)> {
    if xs.is_empty() {
        return Err(HybridError::EmptyDataset);
    }
    if xs.len() != ys.len() {
        return Err(HybridError::LengthMismatch(xs.len(), ys.len()));
    }
    if model.head_outputs() < mode.head_outputs() {
        return Err(HybridError::HeadTooSmall(mode, mode.head_outputs()));
    }
    let p = &model.params;
    let n = xs.len() as f64;
    let scale = model.architecture.angle_scale;
    let thetas = p.thetas.as_slice().expect("standard layout");
    let mut grads = Parameters::zeros_like(p);
    let mut loss = 0.0;

    for (&x, &y) in xs.iter().zip(ys) {
        if !x.is_finite() {
            return Err(HybridError::NonFinite(x));
        }
        let u = x / model.x_scale;
        let (h1, h2, a) = model.front(x);
        let angles: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let jac = quantum_gradient(layer, &angles, thetas)?;
        let z = Array1::from(jac.z.clone());
        let h = p.head_w.dot(&z) + &p.head_b;
        let mu = model.y_scale * h[0];

        let mut dh = Array1::<f64>::zeros(h.len());
        match mode {
            LossMode::Mse => {
                loss += (mu - y).powi(2) / n;
                dh[0] = 2.0 * (mu - y) * model.y_scale / n;
            }
            LossMode::GaussianNll => {
                let (var, floored) = variance_of(h[1], model.y_scale);
                let r2 = (y - mu).powi(2);
                loss += 0.5 * (var.ln() + r2 / var) / n;
                dh[0] = model.y_scale * (mu - y) / var / n;
                dh[1] = if floored { 0.0 } else { 0.5 * (1.0 - r2 / var) / n };
            }
        }

        // Head.
        for k in 0..h.len() {
            grads.head_b[k] += dh[k];
            for j in 0..z.len() {
                grads.head_w[[k, j]] += dh[k] * z[j];
            }
        }
        let dz = p.head_w.t().dot(&dh);
        // Quantum layer.
        grads.thetas += &jac.d_thetas.t().dot(&dz);
        let da = jac.d_angles.t().dot(&dz) * scale;
        // Classical front end.
        grads.b3 += &da;
        for i in 0..da.len() {
            for j in 0..h2.len() {
                grads.w3[[i, j]] += da[i] * h2[j];
            }
        }
        let dpre2 = p.w3.t().dot(&da) * h2.mapv(|v| 1.0 - v * v);
        grads.b2 += &dpre2;
        for i in 0..dpre2.len() {
            let di = dpre2[i];
            let mut row = grads.w2.row_mut(i);
            row.scaled_add(di, &h1);
        }
        let dpre1 = p.w2.t().dot(&dpre2) * h1.mapv(|v| 1.0 - v * v);
        grads.b1 += &dpre1;
        grads.w1.column_mut(0).scaled_add(u, &dpre1);
    }
    Ok((loss, grads))
}

/// Mean loss only (one layer execution per point).
pub fn loss(model: &HybridModel, xs: &[f64], ys: &[f64], layer: &QuantumLayer, mode: LossMode) -> Result<f64> {
    if xs.is_empty() {
        return Err(HybridError::EmptyDataset);
    }
    if xs.len() != ys.len() {
        return Err(HybridError::LengthMismatch(xs.len(), ys.len()));
    }
    if model.head_outputs() < mode.head_outputs() {
        return Err(HybridError::HeadTooSmall(mode, mode.head_outputs()));
    }
    let n = xs.len() as f64;
    let mut total = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let pred = forward(model, x, layer)?;
        total += match mode {
            LossMode::Mse => (pred.mean - y).powi(2),
            LossMode::GaussianNll => {
                let var = pred.variance.expect("head has a variance output");
                0.5 * (var.ln() + (y - pred.mean).powi(2) / var)
            }
        } / n;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: HybridModel,
    /// Loss before each optimizer step; one entry per epoch.
    pub losses: Vec<f64>,
    /// Loss of the returned model.
    pub final_loss: f64,
}

/// Full-batch Adam for `config.epochs` steps.
pub fn train(
    model: HybridModel,
    dataset: &Dataset,
    twin: Option<&QuantumDigitalTwin>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let layer = QuantumLayer::for_model(&model, twin)?;
    let mut model = model;
    let mut flat = model.params.to_flat();
    let mut m1 = vec![0.0; flat.len()];
    let mut m2 = vec![0.0; flat.len()];
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (l, grads) = loss_and_gradients(&model, &dataset.x, &dataset.y, &layer, config.loss)?;
        let g = grads.to_flat();
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(HybridError::Divergence { epoch, loss: l });
        }
        losses.push(l);
        let t = (epoch + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for i in 0..flat.len() {
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g[i];
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g[i] * g[i];
            flat[i] -= config.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + config.epsilon);
        }
        model.params.set_flat(&flat)?;
    }
    let final_loss = loss(&model, &dataset.x, &dataset.y, &layer, config.loss)?;
    if !final_loss.is_finite() {
        return Err(HybridError::Divergence {
            epoch: config.epochs,
            loss: final_loss,
        });
    }
    Ok(TrainOutcome {
        model,
        losses,
        final_loss,
    })
}

/// Model checkpoint: parameters, training config and twin provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: HybridModel,
    pub config: TrainConfig,
    pub twin_source: Option<TwinSource>,
    pub twin_seed: Option<u64>,
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ConfusionMatrix;
    use crate::twin::GateNoise;

    fn small_arch(m: usize) -> Architecture {
        Architecture {
            hidden: 6,
            register_size: m,
            ..Architecture::default()
        }
    }

    #[test]
    fn noiseless_cubic_point() {
        let d = generate_dataset(50, (2.0, 2.0 + 1e-9), 0.0, 1).unwrap();
        for (x, y) in d.x.iter().zip(&d.y) {
            assert_eq!(*y, cubic(*x));
        }
        let exact = Dataset::new(vec![2.0], vec![cubic(2.0)]).unwrap();
        assert_eq!(exact.y[0], 8.0);
    }

    #[test]
    fn dataset_determinism_and_errors() {
        assert_eq!(
            generate_dataset(20, (-4.0, 4.0), 3.0, 9),
            generate_dataset(20, (-4.0, 4.0), 3.0, 9)
        );
        assert_eq!(
            generate_dataset(5, (1.0, 1.0), 0.0, 0),
            Err(HybridError::Domain(1.0, 1.0))
        );
        assert_eq!(generate_dataset(0, (0.0, 1.0), 0.0, 0), Err(HybridError::EmptyDataset));
        let d = generate_dataset(20, (-4.0, 4.0), 3.0, 9).unwrap();
        assert_eq!(d.x_scale, d.x.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        assert!(d.to_csv().starts_with("x,y\n"));
    }

    #[test]
    fn noise_level_of_generated_targets() {
        let d = generate_dataset(10_000, (-4.0, 4.0), 3.0, 2).unwrap();
        let r: Vec<f64> = d.x.iter().zip(&d.y).map(|(x, y)| y - cubic(*x)).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        assert!((2.9..=3.1).contains(&sd), "{sd}");
    }

    #[test]
    fn zero_network_outputs_zero() {
        let model = HybridModel::zeros(Architecture::default(), LossMode::Mse, 4.0, 64.0);
        for x in [-3.0, 0.0, 5.5] {
            assert_eq!(predict(&model, x, None).unwrap().mean, 0.0);
        }
        assert!(matches!(
            predict(&model, f64::NAN, None),
            Err(HybridError::NonFinite(_))
        ));
    }

    #[test]
    fn one_qubit_reduction() {
        let layer = QuantumLayer::new(1, false, None).unwrap();
        for (a, t) in [(0.3, -1.2), (2.0, 0.5), (-0.7, 3.0)] {
            let z = layer.expectations(&[a], &[t]).unwrap();
            assert!((z[0] - f64::cos(a + t)).abs() < 1e-14);
            let jac = quantum_gradient(&layer, &[a], &[t]).unwrap();
            assert!((jac.d_thetas[[0, 0]] + f64::sin(a + t)).abs() < 1e-12);
            assert!((jac.d_angles[[0, 0]] + f64::sin(a + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_shift_diagonal_without_entangler() {
        let layer = QuantumLayer::new(3, false, None).unwrap();
        let (angles, thetas) = ([0.1, -0.4, 1.3], [0.7, 0.2, -2.0]);
        let jac = quantum_gradient(&layer, &angles, &thetas).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                let expect = if j == k { -f64::sin(angles[j] + thetas[j]) } else { 0.0 };
                assert!((jac.d_thetas[[k, j]] - expect).abs() < 1e-12);
                assert!((jac.d_angles[[k, j]] - expect).abs() < 1e-12);
            }
        }
        let zero = quantum_gradient(&layer, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(zero.d_thetas.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn parameter_shift_matches_finite_difference_on_noisy_twin() {
        let twin = QuantumDigitalTwin::uniform(
            3,
            40.0,
            30.0,
            ConfusionMatrix::IDENTITY,
            GateNoise {
                duration_ns: 800.0,
                error: 0.01,
            },
            GateNoise {
                duration_ns: 3000.0,
                error: 0.04,
            },
        )
        .unwrap();
        let layer = QuantumLayer::new(3, true, Some(&twin)).unwrap();
        let (angles, thetas) = ([0.4, -1.1, 2.2], [0.3, 0.9, -0.5]);
        let jac = quantum_gradient(&layer, &angles, &thetas).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut p = thetas;
            let mut m = thetas;
            p[j] += h;
            m[j] -= h;
            let zp = layer.expectations(&angles, &p).unwrap();
            let zm = layer.expectations(&angles, &m).unwrap();
            for k in 0..3 {
                assert!((jac.d_thetas[[k, j]] - (zp[k] - zm[k]) / (2.0 * h)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn perfect_predictions_have_zero_head_gradient() {
        let d = generate_dataset(4, (-1.0, 1.0), 0.0, 3).unwrap();
        let model = HybridModel::init(small_arch(3), LossMode::Mse, &d, 5);
        let layer = QuantumLayer::for_model(&model, None).unwrap();
        let ys: Vec<f64> = d.x.iter().map(|&x| forward(&model, x, &layer).unwrap().mean).collect();
        let (l, g) = loss_and_gradients(&model, &d.x, &ys, &layer, LossMode::Mse).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.head_w.iter().chain(g.head_b.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn nll_with_unit_variance_is_half_mse() {
        let d = Dataset::new(vec![-0.8, 0.1, 0.6], vec![0.2, -0.5, 0.9]).unwrap();
        let mut model = HybridModel::init(small_arch(3), LossMode::GaussianNll, &d, 8);
        // y_scale is 0.9 here; pick h_1 so the variance is exactly representable near 1.
        model.params.head_w.row_mut(1).fill(0.0);
        model.params.head_b[1] = -2.0 * model.y_scale.ln();
        let layer = QuantumLayer::for_model(&model, None).unwrap();
        let (mse, gm) = loss_and_gradients(&model, &d.x, &d.y, &layer, LossMode::Mse).unwrap();
        let (nll, gn) = loss_and_gradients(&model, &d.x, &d.y, &layer, LossMode::GaussianNll).unwrap();
        assert!((nll - mse / 2.0).abs() < 1e-12, "{nll} vs {mse}");
        for (a, b) in gm.head_w.row(0).iter().zip(gn.head_w.row(0)) {
            assert!((a / 2.0 - b).abs() < 1e-12);
        }
        assert!((gm.head_b[0] / 2.0 - gn.head_b[0]).abs() < 1e-12);
    }

    #[test]
    fn mse_mode_needs_one_output_and_nll_two() {
        let d = Dataset::new(vec![1.0], vec![1.0]).unwrap();
        let model = HybridModel::init(small_arch(1), LossMode::Mse, &d, 0);
        let layer = QuantumLayer::for_model(&model, None).unwrap();
        assert_eq!(
            loss_and_gradients(&model, &d.x, &d.y, &layer, LossMode::GaussianNll).unwrap_err(),
            HybridError::HeadTooSmall(LossMode::GaussianNll, 2)
        );
        assert_eq!(
            loss_and_gradients(&model, &[], &[], &layer, LossMode::Mse).unwrap_err(),
            HybridError::EmptyDataset
        );
    }

    #[test]
    fn flat_round_trip() {
        let d = Dataset::new(vec![1.0], vec![1.0]).unwrap();
        let mut model = HybridModel::init(small_arch(3), LossMode::GaussianNll, &d, 4);
        let flat = model.params.to_flat();
        assert_eq!(flat.len(), 6 + 6 + 36 + 6 + 18 + 3 + 3 + 6 + 2);
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        model.params.set_flat(&shifted).unwrap();
        assert_eq!(model.params.to_flat(), shifted);
        assert!(model.params.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn single_epoch_and_determinism() {
        let d = generate_dataset(8, (-4.0, 4.0), 3.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let model = HybridModel::init(small_arch(3), LossMode::Mse, &d, 2);
        let out = train(model.clone(), &d, None, &cfg).unwrap();
        assert_eq!(out.losses.len(), 1);
        assert_ne!(out.model, model);
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(model.clone(), &d, None, &cfg).unwrap();
        let b = train(model, &d, None, &cfg).unwrap();
        assert_eq!(a.model.params.to_flat(), b.model.params.to_flat());
        assert!(TrainConfig {
            epochs: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = generate_dataset(4, (-4.0, 4.0), 3.0, 1).unwrap();
        let mut model = HybridModel::init(small_arch(1), LossMode::Mse, &d, 2);
        model.params.head_b[0] = f64::INFINITY;
        let err = train(model, &d, None, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, HybridError::Divergence { epoch: 0, .. }));
    }
}
