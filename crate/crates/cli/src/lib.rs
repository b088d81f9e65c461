// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Command-line driver: ingest calibration data, inspect it, sample twins and
//! run the ensemble regression experiment.
//!
//! Exit codes: 0 success, 1 input or usage error, 2 store conflict,
//! 3 numerical failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qtwin_core::calibration::{
    self, format_timestamp, parse_timestamp, CalibrationError, CalibrationSnapshot, Property, SnapshotFormat,
    SnapshotKey, TimestampSelector,
};
use qtwin_core::ensemble::{self, EnsembleError, EnsembleSpec};
use qtwin_core::hybrid::{self, Architecture, HybridError, TrainConfig};
use qtwin_core::twin;

pub const EXIT_INPUT: u8 = 1;
pub const EXIT_CONFLICT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl CliError {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INPUT,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self::input(error)
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        let code = match e {
            CalibrationError::KeyCollision(_) => EXIT_CONFLICT,
            _ => EXIT_INPUT,
        };
        Self { code, error: e.into() }
    }
}

fn is_numeric(e: &HybridError) -> bool {
    matches!(
        e,
        HybridError::Divergence { .. } | HybridError::NonFinite(_) | HybridError::Sim(_)
    )
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        let code = match &e {
            EnsembleError::Member { source, .. } if is_numeric(source) => EXIT_NUMERIC,
            EnsembleError::Hybrid(h) if is_numeric(h) => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        Self { code, error: e.into() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "qtwin",
    version,
    about = "Quantum digital twin ensembles from device calibration data"
)]
pub struct Cli {
    /// Snapshot store directory.
    #[arg(long, global = true, default_value = "store")]
    pub store: PathBuf,
    /// Master seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of ensemble members trained at once (default: all).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InputFormat {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a calibration file and add it to the store.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: InputFormat,
        /// Backend name for CSV input without a `# backend:` line.
        #[arg(long)]
        backend: Option<String>,
        /// Calibration time for CSV input without a `# timestamp:` line.
        #[arg(long)]
        timestamp: Option<String>,
    },
    /// Histogram of one calibration property.
    Hist {
        /// Snapshot key, `backend@timestamp`.
        key: SnapshotKey,
        #[arg(value_parser = parse_property)]
        property: Property,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Sample twins from a stored snapshot.
    Twins {
        key: SnapshotKey,
        #[arg(long, short, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, short, default_value_t = 3)]
        m: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run the ensemble experiment from a config or manifest file.
    Run { config: PathBuf },
}

fn parse_property(s: &str) -> std::result::Result<Property, String> {
    s.parse::<Property>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimestampRule {
    #[default]
    Exact,
    LatestBefore,
}

/// Where the experiment's calibration snapshot comes from: a file, or a
/// store entry selected by backend and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotSelector {
    pub path: Option<PathBuf>,
    pub backend: Option<String>,
    pub timestamp: Option<String>,
    pub rule: TimestampRule,
}

impl Default for SnapshotSelector {
    fn default() -> Self {
        Self {
            path: Some(PathBuf::from("fixtures/synthetic_sherbrooke.json")),
            backend: None,
            timestamp: None,
            rule: TimestampRule::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_points: usize,
    pub domain: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_points: 20,
            domain: (-4.0, 4.0),
            noise_sigma: 3.0,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            points: 121,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub snapshot: SnapshotSelector,
    pub n_twins: usize,
    pub register_size: usize,
    pub hidden: usize,
    pub entangle: bool,
    pub identical_twins: bool,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            snapshot: SnapshotSelector::default(),
            n_twins: 5,
            register_size: 3,
            hidden: 100,
            entangle: false,
            identical_twins: false,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            output_dir: PathBuf::from("out"),
            master_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.n_twins >= 1, "n_twins must be at least 1");
        anyhow::ensure!(
            (1..=qtwin_core::sim::MAX_QUBITS).contains(&self.register_size),
            "register_size must lie in 1..={}",
            qtwin_core::sim::MAX_QUBITS
        );
        anyhow::ensure!(self.hidden >= 1, "hidden must be at least 1");
        anyhow::ensure!(self.grid.points >= 1, "grid.points must be at least 1");
        anyhow::ensure!(
            self.grid.lo.is_finite() && self.grid.hi.is_finite() && self.grid.lo <= self.grid.hi,
            "grid bounds must be finite with lo <= hi"
        );
        anyhow::ensure!(
            self.snapshot.path.is_some() || (self.snapshot.backend.is_some() && self.snapshot.timestamp.is_some()),
            "snapshot needs either `path` or both `backend` and `timestamp`"
        );
        self.train.validate()?;
        Ok(())
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            register_size: self.register_size,
            entangle: self.entangle,
            ..Architecture::default()
        }
    }

    /// Makes relative paths absolute against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.snapshot.path {
            if p.is_relative() {
                self.snapshot.path = Some(base.join(p));
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub index: usize,
    pub twin_seed: u64,
    pub init_seed: u64,
    pub status: String,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Everything needed to repeat a run: `qtwin run manifest.json` reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub snapshot_backend: String,
    pub snapshot_timestamp: String,
    pub members: Vec<MemberRecord>,
    pub final_losses: Vec<Option<f64>>,
    pub uq: Option<ensemble::UqReport>,
}

/// Reads an experiment config, or the config embedded in a run manifest.
/// Relative paths resolve against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    let is_manifest = value.get("status").is_some() && value.get("config").is_some();
    let inner = if is_manifest { value["config"].clone() } else { value };
    let mut config: ExperimentConfig =
        serde_json::from_value(inner).with_context(|| format!("invalid experiment config in {}", path.display()))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    config.resolve_paths(&base);
    Ok(config)
}

fn select_snapshot(config: &ExperimentConfig, store: &Path) -> Result<CalibrationSnapshot> {
    let sel = &config.snapshot;
    if let Some(path) = &sel.path {
        let raw = fs::read(path).with_context(|| format!("reading snapshot {}", path.display()))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => SnapshotFormat::CalibrationCsv {
                backend: sel.backend.clone(),
                timestamp: sel.timestamp.clone(),
            },
            _ => SnapshotFormat::CanonicalJson,
        };
        let parsed = calibration::parse_snapshot(&raw, &format)?;
        for w in &parsed.warnings {
            log::warn!("{w}");
        }
        return Ok(parsed.snapshot);
    }
    let backend = sel.backend.as_deref().unwrap_or_default();
    let instant = parse_timestamp(sel.timestamp.as_deref().unwrap_or_default()).map_err(|m| anyhow!(m))?;
    let selector = match sel.rule {
        TimestampRule::Exact => TimestampSelector::Exact(instant),
        TimestampRule::LatestBefore => TimestampSelector::LatestBefore(instant),
    };
    Ok(calibration::load_snapshot(store, backend, selector)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_ingest(
    store: &Path,
    input: &Path,
    format: InputFormat,
    backend: Option<String>,
    timestamp: Option<String>,
) -> Result<SnapshotKey> {
    let raw = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let format = match format {
        InputFormat::Json => SnapshotFormat::CanonicalJson,
        InputFormat::Csv => SnapshotFormat::CalibrationCsv { backend, timestamp },
    };
    let parsed = calibration::parse_snapshot(&raw, &format)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    Ok(calibration::store_snapshot(store, &parsed.snapshot)?)
}

pub fn cmd_hist(
    store: &Path,
    key: &SnapshotKey,
    property: Property,
    bins: usize,
    output: &Path,
) -> Result<calibration::Histogram> {
    let snap = calibration::load_snapshot(store, &key.backend, TimestampSelector::Exact(key.timestamp))?;
    let hist = calibration::empirical_histogram(&snap, property, bins)?;
    write(output, hist.to_csv())?;
    Ok(hist)
}

#[derive(Debug, Serialize)]
struct TwinsManifest<'a> {
    backend: &'a str,
    timestamp: String,
    master_seed: u64,
    n: usize,
    register_size: usize,
    seeds: Vec<u64>,
    files: Vec<String>,
}

pub fn cmd_twins(
    store: &Path,
    key: &SnapshotKey,
    n: usize,
    m: usize,
    seed: u64,
    output: &Path,
) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(CliError::input(anyhow!("n must be at least 1")));
    }
    let snap = calibration::load_snapshot(store, &key.backend, TimestampSelector::Exact(key.timestamp))?;
    let twins = twin::replicate_twins(&snap, n, m, seed, false).map_err(CliError::input)?;
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let mut files = Vec::with_capacity(n);
    for (i, t) in twins.iter().enumerate() {
        let p = output.join(format!("twin_{i}.json"));
        write(&p, t.to_json())?;
        files.push(p);
    }
    let manifest = TwinsManifest {
        backend: &snap.backend,
        timestamp: format_timestamp(&snap.timestamp),
        master_seed: seed,
        n,
        register_size: m,
        seeds: twins.iter().map(|t| t.seed).collect(),
        files: (0..n).map(|i| format!("twin_{i}.json")).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")? + "\n";
    write(&output.join("manifest.json"), text)?;
    Ok(files)
}

/// Runs the experiment and writes `band.csv`, `train.csv`, `manifest.json`
/// and the ensemble checkpoint under `config.output_dir`.
pub fn cmd_run(config: &ExperimentConfig, store: &Path, workers: Option<usize>) -> Result<RunManifest> {
    config.validate()?;
    let snap = select_snapshot(config, store)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let d = &config.dataset;
    let dataset = hybrid::generate_dataset(d.n_points, d.domain, d.noise_sigma, d.seed).map_err(CliError::input)?;
    write(&out.join("train.csv"), dataset.to_csv())?;

    let spec = EnsembleSpec {
        members: config.n_twins,
        architecture: config.architecture(),
        train: config.train.clone(),
        master_seed: config.master_seed,
        identical_twins: config.identical_twins,
    };
    let workers = workers.unwrap_or(config.n_twins);
    let run = ensemble::train_members(&snap, &dataset, &spec, workers)?;

    let members: Vec<MemberRecord> = run
        .outcomes
        .iter()
        .enumerate()
        .map(|(index, o)| MemberRecord {
            index,
            twin_seed: run.twins[index].seed,
            init_seed: ensemble::init_seed(config.master_seed, index),
            status: if o.is_ok() { "trained" } else { "failed" }.into(),
            final_loss: o.as_ref().ok().map(|m| m.final_loss),
            error: o.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    let mut manifest = RunManifest {
        status: "failed".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        snapshot_backend: snap.backend.clone(),
        snapshot_timestamp: format_timestamp(&snap.timestamp),
        final_losses: members.iter().map(|m| m.final_loss).collect(),
        members,
        uq: None,
    };
    let write_manifest = |m: &RunManifest| -> Result<()> {
        let text = serde_json::to_string_pretty(m).context("serializing manifest")? + "\n";
        write(&out.join("manifest.json"), text)
    };

    let ens = match run.into_ensemble() {
        Ok(e) => e,
        Err(e) => {
            write_manifest(&manifest)?;
            return Err(e.into());
        }
    };
    let grid = ensemble::linear_grid(config.grid.lo, config.grid.hi, config.grid.points);
    let band = match ensemble::predict_band(&ens, &grid) {
        Ok(b) => b,
        Err(e) => {
            write_manifest(&manifest)?;
            return Err(e.into());
        }
    };
    write(&out.join("band.csv"), band.to_csv(Some(&hybrid::cubic), true))?;
    ens.save(&out.join("ensemble"))?;
    manifest.uq = ensemble::uq_report(&band, &dataset).ok();
    manifest.status = "complete".into();
    write_manifest(&manifest)?;
    Ok(manifest)
}

/// Executes a parsed command line, printing results to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    let workers = cli.workers.map(|w| w as usize);
    match cli.command {
        Command::Ingest {
            input,
            format,
            backend,
            timestamp,
        } => {
            let key = cmd_ingest(&cli.store, &input, format, backend, timestamp)?;
            println!("{key}");
        }
        Command::Hist {
            key,
            property,
            bins,
            output,
        } => {
            let h = cmd_hist(&cli.store, &key, property, bins, &output)?;
            let s = h.summary;
            println!("mean={} std={} min={} max={}", s.mean, s.std, s.min, s.max);
        }
        Command::Twins { key, n, m, output } => {
            let files = cmd_twins(&cli.store, &key, n as usize, m, cli.seed.unwrap_or(0), &output)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Run { config } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = cli.seed {
                config.master_seed = seed;
            }
            let manifest = cmd_run(&config, &cli.store, workers)?;
            if let Some(uq) = manifest.uq {
                println!(
                    "rmse={} in_domain_std={} out_of_domain_std={}",
                    uq.in_distribution_rmse, uq.mean_in_domain_std, uq.mean_out_of_domain_std
                );
            }
            println!("{}", config.output_dir.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
