// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Deep ensembles of hybrid models, one member per twin.
//!
//! Members are independent units of work. They may be trained on any number
//! of worker threads; results are gathered by member index, so the ensemble
//! is bitwise identical for every worker count.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationSnapshot;
use crate::hybrid::{self, Architecture, Dataset, HybridError, HybridModel, LossMode, ModelCheckpoint, TrainConfig};
use crate::seed;
use crate::twin::{self, QuantumDigitalTwin, TwinError, TwinSource};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("member {index} failed: {source}")]
    Member { index: usize, source: HybridError },
    #[error("member seeds collide ({0} and {1})")]
    SeedCollision(usize, usize),
    #[error("prediction grid is empty")]
    EmptyGrid,
    #[error("degenerate training domain")]
    DegenerateDomain,
    #[error("grid must cover the training domain [{lo}, {hi}] and points outside it")]
    GridCoverage { lo: f64, hi: f64 },
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

type Result<T> = std::result::Result<T, EnsembleError>;

const INIT_STREAM: u64 = 0x696E_6974_5F73_6565;

/// Initialization seed of member `index`, from a stream separate from the
/// twin seeds.
pub fn init_seed(master_seed: u64, index: usize) -> u64 {
    seed::split(master_seed ^ INIT_STREAM, index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub members: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub master_seed: u64,
    /// Use one twin sample for every member.
    pub identical_twins: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 5,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            master_seed: 7,
            identical_twins: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub model: HybridModel,
    pub twin: QuantumDigitalTwin,
    pub init_seed: u64,
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

impl Member {
    pub fn checkpoint(&self, config: &TrainConfig) -> ModelCheckpoint {
        ModelCheckpoint {
            model: self.model.clone(),
            config: TrainConfig {
                seed: self.init_seed,
                ..config.clone()
            },
            twin_source: Some(self.twin.source.clone()),
            twin_seed: Some(self.twin.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub spec: EnsembleSpec,
}

/// Per-member results of a training run, including failures.
#[derive(Debug)]
pub struct EnsembleRun {
    pub spec: EnsembleSpec,
    pub twins: Vec<QuantumDigitalTwin>,
    pub outcomes: Vec<std::result::Result<Member, HybridError>>,
}

impl EnsembleRun {
    /// The ensemble, or the first failing member.
    pub fn into_ensemble(self) -> Result<Ensemble> {
        let mut members = Vec::with_capacity(self.outcomes.len());
        for (index, outcome) in self.outcomes.into_iter().enumerate() {
            members.push(outcome.map_err(|source| EnsembleError::Member { index, source })?);
        }
        Ok(Ensemble {
            members,
            spec: self.spec,
        })
    }
}

fn train_member(
    index: usize,
    twin: &QuantumDigitalTwin,
    dataset: &Dataset,
    spec: &EnsembleSpec,
) -> std::result::Result<Member, HybridError> {
    let seed = init_seed(spec.master_seed, index);
    let config = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let model = HybridModel::init(spec.architecture, config.loss, dataset, seed);
    let out = hybrid::train(model, dataset, Some(twin), &config)?;
    Ok(Member {
        model: out.model,
        twin: twin.clone(),
        init_seed: seed,
        losses: out.losses,
        final_loss: out.final_loss,
    })
}

/// Trains every member on its own twin with at most `workers` members in
/// flight, keeping failures per member.
pub fn train_members(
    snapshot: &CalibrationSnapshot,
    dataset: &Dataset,
    spec: &EnsembleSpec,
    workers: usize,
) -> Result<EnsembleRun> {
    if spec.members == 0 {
        return Err(EnsembleError::NoMembers);
    }
    if workers == 0 {
        return Err(EnsembleError::NoWorkers);
    }
    spec.train.validate()?;
    let seeds: Vec<u64> = (0..spec.members).map(|i| init_seed(spec.master_seed, i)).collect();
    for i in 0..seeds.len() {
        if let Some(j) = (i + 1..seeds.len()).find(|&j| seeds[j] == seeds[i]) {
            return Err(EnsembleError::SeedCollision(i, j));
        }
    }
    let twins = twin::replicate_twins(
        snapshot,
        spec.members,
        spec.architecture.register_size,
        spec.master_seed,
        spec.identical_twins,
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.min(spec.members))
        .build()
        .map_err(|e| EnsembleError::Pool(e.to_string()))?;
    let outcomes = pool.install(|| {
        twins
            .par_iter()
            .enumerate()
            .map(|(i, t)| train_member(i, t, dataset, spec))
            .collect()
    });
    Ok(EnsembleRun {
        spec: spec.clone(),
        twins,
        outcomes,
    })
}

pub fn train_ensemble(
    snapshot: &CalibrationSnapshot,
    dataset: &Dataset,
    spec: &EnsembleSpec,
    workers: usize,
) -> Result<Ensemble> {
    train_members(snapshot, dataset, spec, workers)?.into_ensemble()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `members[m][i]`: member `m`'s mean prediction at `x[i]`.
    pub members: Vec<Vec<f64>>,
    /// Per-member variances in gaussian-nll mode.
    pub member_variances: Option<Vec<Vec<f64>>>,
}

impl PredictionBand {
    /// Aggregates stored member predictions. Without variances the spread is
    /// the population standard deviation across members; with them it is the
    /// standard deviation of the equally weighted Gaussian mixture.
    pub fn aggregate(x: Vec<f64>, members: Vec<Vec<f64>>, member_variances: Option<Vec<Vec<f64>>>) -> Self {
        let n = members.len() as f64;
        let len = x.len();
        let mut mean = vec![0.0; len];
        let mut std = vec![0.0; len];
        for i in 0..len {
            let mu = members.iter().map(|m| m[i]).sum::<f64>() / n;
            let var = match &member_variances {
                None => members.iter().map(|m| (m[i] - mu).powi(2)).sum::<f64>() / n,
                Some(vars) => {
                    let second = members.iter().zip(vars).map(|(m, v)| v[i] + m[i] * m[i]).sum::<f64>() / n;
                    second - mu * mu
                }
            };
            mean[i] = mu;
            std[i] = var.max(0.0).sqrt();
        }
        Self {
            x,
            mean,
            std,
            members,
            member_variances,
        }
    }

    /// CSV `x[,true],mean,std[,member_0,...]`.
    pub fn to_csv(&self, truth: Option<&dyn Fn(f64) -> f64>, with_members: bool) -> String {
        let mut header = vec!["x".to_string()];
        if truth.is_some() {
            header.push("true".into());
        }
        header.extend(["mean".into(), "std".into()]);
        if with_members {
            header.extend((0..self.members.len()).map(|m| format!("member_{m}")));
        }
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.x.len() {
            let mut row = vec![self.x[i].to_string()];
            if let Some(f) = truth {
                row.push(f(self.x[i]).to_string());
            }
            row.push(self.mean[i].to_string());
            row.push(self.std[i].to_string());
            if with_members {
                row.extend(self.members.iter().map(|m| m[i].to_string()));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Evaluates every member on its own twin over `grid`.
pub fn predict_band(ensemble: &Ensemble, grid: &[f64]) -> Result<PredictionBand> {
    if grid.is_empty() {
        return Err(EnsembleError::EmptyGrid);
    }
    let nll = ensemble.spec.train.loss == LossMode::GaussianNll;
    let mut means = Vec::with_capacity(ensemble.members.len());
    let mut vars = Vec::with_capacity(ensemble.members.len());
    for member in &ensemble.members {
        let layer = hybrid::QuantumLayer::for_model(&member.model, Some(&member.twin))?;
        let preds = grid
            .iter()
            .map(|&x| hybrid::forward(&member.model, x, &layer))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        means.push(preds.iter().map(|p| p.mean).collect::<Vec<_>>());
        if nll {
            vars.push(preds.iter().map(|p| p.variance.unwrap_or(0.0)).collect::<Vec<_>>());
        }
    }
    Ok(PredictionBand::aggregate(grid.to_vec(), means, nll.then_some(vars)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    /// RMSE of the band mean, linearly interpolated at the training inputs,
    /// against the training targets.
    pub in_distribution_rmse: f64,
    pub mean_in_domain_std: f64,
    pub mean_out_of_domain_std: f64,
}

pub fn uq_report(band: &PredictionBand, dataset: &Dataset) -> Result<UqReport> {
    let lo = dataset.x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dataset.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if dataset.is_empty() || lo >= hi {
        return Err(EnsembleError::DegenerateDomain);
    }
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (x, s) in band.x.iter().zip(&band.std) {
        if (lo..=hi).contains(x) {
            inside.push(*s);
        } else {
            outside.push(*s);
        }
    }
    let mut points: Vec<(f64, f64)> = band.x.iter().copied().zip(band.mean.iter().copied()).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let covers = points.first().is_some_and(|p| p.0 <= lo) && points.last().is_some_and(|p| p.0 >= hi);
    if inside.is_empty() || outside.is_empty() || !covers {
        return Err(EnsembleError::GridCoverage { lo, hi });
    }
    let interpolate = |x: f64| {
        let k = points.partition_point(|p| p.0 < x);
        if k == 0 {
            return points[0].1;
        }
        let (x0, y0) = points[k - 1];
        let (x1, y1) = points[k.min(points.len() - 1)];
        if x1 == x0 {
            y1
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    };
    let sse: f64 = dataset
        .x
        .iter()
        .zip(&dataset.y)
        .map(|(&x, &y)| (interpolate(x) - y).powi(2))
        .sum();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(UqReport {
        in_distribution_rmse: (sse / dataset.len() as f64).sqrt(),
        mean_in_domain_std: mean(&inside),
        mean_out_of_domain_std: mean(&outside),
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub master_seed: u64,
    pub members: usize,
    pub snapshot: TwinSource,
    pub spec: EnsembleSpec,
    pub final_losses: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EnsembleError + '_ {
    move |e| EnsembleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> EnsembleError + '_ {
    move |e| EnsembleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl Ensemble {
    /// Writes `member_<i>.json`, `twin_<i>.json` and `ensemble.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, m) in self.members.iter().enumerate() {
            let p = dir.join(format!("member_{i}.json"));
            fs::write(&p, m.checkpoint(&self.spec.train).to_json()).map_err(io_err(&p))?;
            let p = dir.join(format!("twin_{i}.json"));
            fs::write(&p, m.twin.to_json()).map_err(io_err(&p))?;
        }
        let manifest = EnsembleManifest {
            master_seed: self.spec.master_seed,
            members: self.members.len(),
            snapshot: self.members[0].twin.source.clone(),
            spec: self.spec.clone(),
            final_losses: self.members.iter().map(|m| m.final_loss).collect(),
        };
        let p = dir.join("ensemble.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&p))? + "\n";
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(())
    }

    /// Reads a directory written by [`Ensemble::save`]. Loss traces are not
    /// persisted and come back empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("ensemble.json");
        let raw = fs::read(&p).map_err(io_err(&p))?;
        let manifest: EnsembleManifest = serde_json::from_slice(&raw).map_err(json_err(&p))?;
        let mut members = Vec::with_capacity(manifest.members);
        for i in 0..manifest.members {
            let p = dir.join(format!("member_{i}.json"));
            let ck: ModelCheckpoint =
                serde_json::from_slice(&fs::read(&p).map_err(io_err(&p))?).map_err(json_err(&p))?;
            let p = dir.join(format!("twin_{i}.json"));
            let twin: QuantumDigitalTwin =
                serde_json::from_slice(&fs::read(&p).map_err(io_err(&p))?).map_err(json_err(&p))?;
            members.push(Member {
                model: ck.model,
                twin,
                init_seed: ck.config.seed,
                losses: Vec::new(),
                final_loss: manifest.final_losses.get(i).copied().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            members,
            spec: manifest.spec,
        })
    }
}
