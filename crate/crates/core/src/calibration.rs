// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Device calibration snapshots.
//!
//! A snapshot is one calibration instant of a backend: per-qubit T1/T2 and
//! readout confusion probabilities, plus per-gate durations and error rates.
//! Units are fixed: T1/T2 in microseconds, gate durations in nanoseconds.
//!
//! The canonical on-disk form is JSON:
//!
//! ```text
//! { "backend": "...", "timestamp": "YYYY-MM-DDThh:mm:ssZ",
//!   "qubits": [ { "id": 0, "t1_us": .., "t2_us": .., "prob_meas1_prep0": .., "prob_meas0_prep1": .. } ],
//!   "gates":  [ { "name": "sx", "qubits": [0], "duration_ns": .., "error": .. } ] }
//! ```
//!
//! IBM-style calibration CSV exports are accepted as an import format and
//! converted to the same in-memory snapshot.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("malformed {format} input: {message}")]
    Syntax { format: &'static str, message: String },
    #[error("{context}: missing mandatory field `{field}`")]
    MissingField { context: String, field: String },
    #[error("{context}: field `{field}` {message}")]
    Invalid {
        context: String,
        field: String,
        message: String,
    },
    #[error("empty qubit list")]
    EmptyQubits,
    #[error("snapshot {0} already stored with different content")]
    KeyCollision(SnapshotKey),
    #[error("no snapshot for backend `{backend}` matching {selector}")]
    NotFound { backend: String, selector: String },
    #[error("property `{0}` has no records in this snapshot")]
    PropertyAbsent(Property),
    #[error("unknown property `{0}` (valid: t1, t2, readout_error, gate_error)")]
    UnknownProperty(String),
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("invalid snapshot key `{0}`, expected <backend>@<timestamp>")]
    BadKey(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, CalibrationError>;

fn invalid(context: impl Into<String>, field: &str, message: impl Into<String>) -> CalibrationError {
    CalibrationError::Invalid {
        context: context.into(),
        field: field.to_string(),
        message: message.into(),
    }
}

/// Per-qubit coherence and readout record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitRecord {
    pub id: usize,
    pub t1_us: f64,
    pub t2_us: f64,
    pub prob_meas1_prep0: f64,
    pub prob_meas0_prep1: f64,
}

impl QubitRecord {
    /// Mean of the two confusion probabilities.
    pub fn readout_error(&self) -> f64 {
        (self.prob_meas1_prep0 + self.prob_meas0_prep1) / 2.0
    }

    fn validate(&self) -> Result<()> {
        let ctx = format!("qubit {}", self.id);
        for (field, v) in [("t1_us", self.t1_us), ("t2_us", self.t2_us)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(&ctx, field, format!("must be positive and finite, got {v}")));
            }
        }
        for (field, v) in [
            ("prob_meas1_prep0", self.prob_meas1_prep0),
            ("prob_meas0_prep1", self.prob_meas0_prep1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(&ctx, field, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Calibration of one gate instance on one or two qubits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub name: String,
    pub qubits: Vec<usize>,
    pub duration_ns: f64,
    /// Average gate infidelity.
    pub error: f64,
}

impl GateRecord {
    pub fn arity(&self) -> usize {
        self.qubits.len()
    }

    fn validate(&self, index: usize, n_qubits: usize) -> Result<()> {
        let ctx = format!("gate {index} ({})", self.name);
        if self.name.is_empty() {
            return Err(invalid(&ctx, "name", "must not be empty"));
        }
        if !matches!(self.qubits.len(), 1 | 2) {
            return Err(invalid(
                &ctx,
                "qubits",
                format!("must list 1 or 2 qubits, got {}", self.qubits.len()),
            ));
        }
        if self.qubits.len() == 2 && self.qubits[0] == self.qubits[1] {
            return Err(invalid(&ctx, "qubits", "indices must be distinct"));
        }
        if let Some(q) = self.qubits.iter().find(|&&q| q >= n_qubits) {
            return Err(invalid(&ctx, "qubits", format!("references unknown qubit {q}")));
        }
        if !(self.duration_ns.is_finite() && self.duration_ns >= 0.0) {
            return Err(invalid(
                &ctx,
                "duration_ns",
                format!("must be non-negative, got {}", self.duration_ns),
            ));
        }
        if !(0.0..=1.0).contains(&self.error) {
            return Err(invalid(
                &ctx,
                "error",
                format!("must lie in [0, 1], got {}", self.error),
            ));
        }
        Ok(())
    }
}

/// One calibration instant of a backend. Qubits are kept sorted by id and
/// gates by name, then qubits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSnapshot {
    pub backend: String,
    #[serde(with = "timestamp_serde")]
    pub timestamp: DateTime<Utc>,
    pub qubits: Vec<QubitRecord>,
    #[serde(default)]
    pub gates: Vec<GateRecord>,
}

mod timestamp_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&ts.format(TIMESTAMP_FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        parse_timestamp(&raw).map_err(serde::de::Error::custom)
    }
}

/// Parses an ISO-8601 instant. Accepts RFC 3339 (any offset, normalized to
/// UTC) and the minute-precision form `YYYY-MM-DDThh:mmZ`. Sub-second parts
/// are truncated.
pub fn parse_timestamp(raw: &str) -> std::result::Result<DateTime<Utc>, String> {
    let raw = raw.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Ok(ts.with_timezone(&Utc).trunc_subsecs(0));
    }
    for fmt in ["%Y-%m-%dT%H:%MZ", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(naive.and_utc().trunc_subsecs(0));
        }
    }
    Err(format!("cannot parse timestamp `{raw}`"))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

impl CalibrationSnapshot {
    /// Sorts qubits by id and checks every invariant.
    pub fn new(
        backend: impl Into<String>,
        timestamp: DateTime<Utc>,
        mut qubits: Vec<QubitRecord>,
        mut gates: Vec<GateRecord>,
    ) -> Result<Self> {
        qubits.sort_by_key(|q| q.id);
        gates.sort_by(|a, b| (&a.name, &a.qubits).cmp(&(&b.name, &b.qubits)));
        let snap = Self {
            backend: backend.into(),
            timestamp: timestamp.trunc_subsecs(0),
            qubits,
            gates,
        };
        snap.validate()?;
        Ok(snap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend.is_empty() {
            return Err(invalid("snapshot", "backend", "must not be empty"));
        }
        if self.qubits.is_empty() {
            return Err(CalibrationError::EmptyQubits);
        }
        for (pos, q) in self.qubits.iter().enumerate() {
            if q.id != pos {
                return Err(invalid(
                    format!("qubit {}", q.id),
                    "id",
                    format!("qubit ids must be 0..{} without gaps or duplicates", self.qubits.len()),
                ));
            }
            q.validate()?;
        }
        for (i, g) in self.gates.iter().enumerate() {
            g.validate(i, self.qubits.len())?;
        }
        Ok(())
    }

    pub fn key(&self) -> SnapshotKey {
        SnapshotKey {
            backend: self.backend.clone(),
            timestamp: self.timestamp,
        }
    }

    /// Canonical JSON text. Reals are written in shortest round-trip form.
    pub fn to_canonical_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("snapshot serialization cannot fail");
        text.push('\n');
        text
    }
}

/// Input formats understood by [`parse_snapshot`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SnapshotFormat {
    #[default]
    CanonicalJson,
    /// IBM-style per-qubit CSV export. The file carries no backend name or
    /// timestamp of its own; these come from `# backend: ...` and
    /// `# timestamp: ...` comment lines or from the fields here, which take
    /// precedence.
    CalibrationCsv {
        backend: Option<String>,
        timestamp: Option<String>,
    },
}

/// A parsed snapshot with the notices raised while reading it.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub snapshot: CalibrationSnapshot,
    /// Unknown fields and other ignored content.
    pub warnings: Vec<String>,
}

pub fn parse_snapshot(raw: &[u8], format: &SnapshotFormat) -> Result<Parsed> {
    let parsed = match format {
        SnapshotFormat::CanonicalJson => parse_json(raw)?,
        SnapshotFormat::CalibrationCsv { backend, timestamp } => {
            parse_csv(raw, backend.as_deref(), timestamp.as_deref())?
        }
    };
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    Ok(parsed)
}

fn take_field<'a>(obj: &'a Map<String, Value>, field: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(field).ok_or_else(|| CalibrationError::MissingField {
        context: ctx.to_string(),
        field: field.to_string(),
    })
}

fn take_f64(obj: &Map<String, Value>, field: &str, ctx: &str) -> Result<f64> {
    take_field(obj, field, ctx)?
        .as_f64()
        .ok_or_else(|| invalid(ctx, field, "must be a number"))
}

fn take_index(value: &Value, field: &str, ctx: &str) -> Result<usize> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| invalid(ctx, field, "must be a non-negative integer"))
}

fn warn_unknown(obj: &Map<String, Value>, known: &[&str], ctx: &str, warnings: &mut Vec<String>) {
    for key in obj.keys().filter(|k| !known.contains(&k.as_str())) {
        warnings.push(format!("{ctx}: unknown field `{key}` ignored"));
    }
}

fn parse_json(raw: &[u8]) -> Result<Parsed> {
    let root: Value = serde_json::from_slice(raw).map_err(|e| CalibrationError::Syntax {
        format: "canonical-json",
        message: e.to_string(),
    })?;
    let obj = root.as_object().ok_or_else(|| CalibrationError::Syntax {
        format: "canonical-json",
        message: "top level must be an object".into(),
    })?;
    let mut warnings = Vec::new();
    warn_unknown(
        obj,
        &["backend", "timestamp", "qubits", "gates"],
        "snapshot",
        &mut warnings,
    );

    let backend = take_field(obj, "backend", "snapshot")?
        .as_str()
        .ok_or_else(|| invalid("snapshot", "backend", "must be a string"))?
        .to_string();
    let raw_ts = take_field(obj, "timestamp", "snapshot")?
        .as_str()
        .ok_or_else(|| invalid("snapshot", "timestamp", "must be a string"))?;
    let timestamp = parse_timestamp(raw_ts).map_err(|m| invalid("snapshot", "timestamp", m))?;

    let qubit_values = take_field(obj, "qubits", "snapshot")?
        .as_array()
        .ok_or_else(|| invalid("snapshot", "qubits", "must be an array"))?;
    let mut qubits = Vec::with_capacity(qubit_values.len());
    for (pos, v) in qubit_values.iter().enumerate() {
        let mut ctx = format!("qubits[{pos}]");
        let q = v
            .as_object()
            .ok_or_else(|| invalid(&ctx, "qubits", "entry must be an object"))?;
        let id = take_index(take_field(q, "id", &ctx)?, "id", &ctx)?;
        ctx = format!("qubit {id}");
        warn_unknown(
            q,
            &["id", "t1_us", "t2_us", "prob_meas1_prep0", "prob_meas0_prep1"],
            &ctx,
            &mut warnings,
        );
        qubits.push(QubitRecord {
            id,
            t1_us: take_f64(q, "t1_us", &ctx)?,
            t2_us: take_f64(q, "t2_us", &ctx)?,
            prob_meas1_prep0: take_f64(q, "prob_meas1_prep0", &ctx)?,
            prob_meas0_prep1: take_f64(q, "prob_meas0_prep1", &ctx)?,
        });
    }

    let mut gates = Vec::new();
    if let Some(gv) = obj.get("gates") {
        let gate_values = gv
            .as_array()
            .ok_or_else(|| invalid("snapshot", "gates", "must be an array"))?;
        for (pos, v) in gate_values.iter().enumerate() {
            let ctx = format!("gates[{pos}]");
            let g = v
                .as_object()
                .ok_or_else(|| invalid(&ctx, "gates", "entry must be an object"))?;
            warn_unknown(g, &["name", "qubits", "duration_ns", "error"], &ctx, &mut warnings);
            let name = take_field(g, "name", &ctx)?
                .as_str()
                .ok_or_else(|| invalid(&ctx, "name", "must be a string"))?
                .to_string();
            let gate_qubits = take_field(g, "qubits", &ctx)?
                .as_array()
                .ok_or_else(|| invalid(&ctx, "qubits", "must be an array"))?
                .iter()
                .map(|q| take_index(q, "qubits", &ctx))
                .collect::<Result<Vec<_>>>()?;
            gates.push(GateRecord {
                name,
                qubits: gate_qubits,
                duration_ns: take_f64(g, "duration_ns", &ctx)?,
                error: take_f64(g, "error", &ctx)?,
            });
        }
    }

    let snapshot = CalibrationSnapshot::new(backend, timestamp, qubits, gates)?;
    Ok(Parsed { snapshot, warnings })
}

// CSV import --------------------------------------------------------------

fn normalize_header(h: &str) -> String {
    h.trim().to_ascii_lowercase()
}

fn csv_f64(cell: &str, field: &str, ctx: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| invalid(ctx, field, format!("cannot parse number `{}`", cell.trim())))
}

/// Single-qubit gate error columns and the gate names they map to.
const CSV_1Q_GATES: &[(&str, &str)] = &[
    ("id error", "id"),
    ("√x (sx) error", "sx"),
    ("sx error", "sx"),
    ("pauli-x error", "x"),
    ("x error", "x"),
    ("rz error", "rz"),
];

const CSV_1Q_DURATION: &[&str] = &["single-qubit gate length (ns)", "single-qubit gate time (ns)"];
const CSV_2Q_DURATION: &[&str] = &["gate time (ns)", "gate length (ns)", "2q gate time (ns)"];

fn csv_2q_gate_name(header: &str) -> Option<String> {
    let name = header.strip_suffix(" error")?;
    matches!(name, "ecr" | "cx" | "cz").then(|| name.to_string())
}

/// Parses `a_b:value;c_d:value` cells used by IBM exports for pair data.
fn parse_pair_map(cell: &str, field: &str, ctx: &str) -> Result<Vec<((usize, usize), f64)>> {
    let mut out = Vec::new();
    for item in cell.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (pair, value) = item
            .split_once(':')
            .ok_or_else(|| invalid(ctx, field, format!("malformed pair entry `{item}`")))?;
        let (a, b) = pair
            .trim()
            .split_once('_')
            .ok_or_else(|| invalid(ctx, field, format!("malformed qubit pair `{pair}`")))?;
        let a = a
            .trim()
            .parse()
            .map_err(|_| invalid(ctx, field, format!("bad qubit `{a}`")))?;
        let b = b
            .trim()
            .parse()
            .map_err(|_| invalid(ctx, field, format!("bad qubit `{b}`")))?;
        out.push(((a, b), csv_f64(value, field, ctx)?));
    }
    Ok(out)
}

fn parse_csv(raw: &[u8], backend: Option<&str>, timestamp: Option<&str>) -> Result<Parsed> {
    let text = std::str::from_utf8(raw).map_err(|e| CalibrationError::Syntax {
        format: "calibration-csv",
        message: e.to_string(),
    })?;
    let mut meta: HashMap<String, String> = HashMap::new();
    let mut body = String::with_capacity(text.len());
    for line in text.lines() {
        if let Some(comment) = line.trim_start().strip_prefix('#') {
            if let Some((k, v)) = comment.split_once(':') {
                meta.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
        } else if !line.trim().is_empty() {
            body.push_str(line);
            body.push('\n');
        }
    }
    let backend = backend
        .map(str::to_string)
        .or_else(|| meta.get("backend").cloned())
        .ok_or_else(|| CalibrationError::MissingField {
            context: "calibration-csv".into(),
            field: "backend".into(),
        })?;
    let raw_ts = timestamp
        .map(str::to_string)
        .or_else(|| meta.get("timestamp").cloned())
        .ok_or_else(|| CalibrationError::MissingField {
            context: "calibration-csv".into(),
            field: "timestamp".into(),
        })?;
    let timestamp = parse_timestamp(&raw_ts).map_err(|m| invalid("calibration-csv", "timestamp", m))?;

    let syntax = |e: csv::Error| CalibrationError::Syntax {
        format: "calibration-csv",
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers: Vec<String> = reader.headers().map_err(syntax)?.iter().map(normalize_header).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let col_any = |names: &[&str]| names.iter().find_map(|n| col(n));

    let required = [
        ("qubit", "Qubit"),
        ("t1 (us)", "T1 (us)"),
        ("t2 (us)", "T2 (us)"),
        ("prob meas1 prep0", "Prob meas1 prep0"),
        ("prob meas0 prep1", "Prob meas0 prep1"),
    ];
    let mut idx = [0usize; 5];
    for (slot, (key, display)) in idx.iter_mut().zip(required) {
        *slot = col(key).ok_or_else(|| CalibrationError::MissingField {
            context: "calibration-csv header".into(),
            field: display.into(),
        })?;
    }
    let one_q: Vec<(usize, &str)> = CSV_1Q_GATES
        .iter()
        .filter_map(|(h, name)| col(h).map(|c| (c, *name)))
        .collect();
    let two_q: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| csv_2q_gate_name(h).map(|n| (c, n)))
        .collect();
    let dur_1q = col_any(CSV_1Q_DURATION);
    let dur_2q = col_any(CSV_2Q_DURATION);

    let mut used: BTreeSet<usize> = idx.iter().copied().collect();
    used.extend(one_q.iter().map(|(c, _)| *c));
    used.extend(two_q.iter().map(|(c, _)| *c));
    used.extend(dur_1q);
    used.extend(dur_2q);
    let mut warnings: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(c, _)| !used.contains(c))
        .map(|(_, h)| format!("calibration-csv: unknown column `{h}` ignored"))
        .collect();

    let mut qubits = Vec::new();
    let mut gates = Vec::new();
    let mut seen_pairs: BTreeSet<(String, usize, usize)> = BTreeSet::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(syntax)?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let row_ctx = format!("row {}", row_no + 1);
        let id: usize = cell(idx[0])
            .parse()
            .map_err(|_| invalid(&row_ctx, "Qubit", format!("bad qubit index `{}`", cell(idx[0]))))?;
        let ctx = format!("qubit {id}");
        qubits.push(QubitRecord {
            id,
            t1_us: csv_f64(cell(idx[1]), "T1 (us)", &ctx)?,
            t2_us: csv_f64(cell(idx[2]), "T2 (us)", &ctx)?,
            prob_meas1_prep0: csv_f64(cell(idx[3]), "Prob meas1 prep0", &ctx)?,
            prob_meas0_prep1: csv_f64(cell(idx[4]), "Prob meas0 prep1", &ctx)?,
        });
        let duration_1q = match dur_1q {
            Some(c) if !cell(c).is_empty() => csv_f64(cell(c), "single-qubit gate length (ns)", &ctx)?,
            _ => 0.0,
        };
        for (c, name) in &one_q {
            if cell(*c).is_empty() {
                continue;
            }
            let duration_ns = if *name == "rz" { 0.0 } else { duration_1q };
            gates.push(GateRecord {
                name: name.to_string(),
                qubits: vec![id],
                duration_ns,
                error: csv_f64(cell(*c), &headers[*c], &ctx)?,
            });
        }
        let durations: HashMap<(usize, usize), f64> = match dur_2q {
            Some(c) => parse_pair_map(cell(c), &headers[c], &ctx)?.into_iter().collect(),
            None => HashMap::new(),
        };
        for (c, name) in &two_q {
            for ((a, b), error) in parse_pair_map(cell(*c), &headers[*c], &ctx)? {
                // Pairs appear once per endpoint row in IBM exports.
                if !seen_pairs.insert((name.clone(), a, b)) {
                    continue;
                }
                let duration_ns = durations.get(&(a, b)).copied().unwrap_or_else(|| {
                    warnings.push(format!("{ctx}: no gate time for {name} {a}_{b}, using 0 ns"));
                    0.0
                });
                gates.push(GateRecord {
                    name: name.clone(),
                    qubits: vec![a, b],
                    duration_ns,
                    error,
                });
            }
        }
    }
    let snapshot = CalibrationSnapshot::new(backend, timestamp, qubits, gates)?;
    Ok(Parsed { snapshot, warnings })
}

// Versioned store -----------------------------------------------------------

/// Store key: one snapshot per (backend, calibration instant).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SnapshotKey {
    pub backend: String,
    pub timestamp: DateTime<Utc>,
}

impl fmt::Display for SnapshotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.backend, format_timestamp(&self.timestamp))
    }
}

impl FromStr for SnapshotKey {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self> {
        let (backend, ts) = s.split_once('@').ok_or_else(|| CalibrationError::BadKey(s.into()))?;
        let timestamp = parse_timestamp(ts).map_err(|_| CalibrationError::BadKey(s.into()))?;
        if backend.is_empty() {
            return Err(CalibrationError::BadKey(s.into()));
        }
        Ok(Self {
            backend: backend.to_string(),
            timestamp,
        })
    }
}

fn check_backend_name(backend: &str) -> Result<()> {
    if backend.is_empty() || backend == "." || backend == ".." || backend.contains(['/', '\\']) {
        return Err(invalid(
            "snapshot",
            "backend",
            format!("`{backend}` is not a valid store directory name"),
        ));
    }
    Ok(())
}

fn snapshot_path(store: &Path, key: &SnapshotKey) -> PathBuf {
    store
        .join(&key.backend)
        .join(format!("{}.json", format_timestamp(&key.timestamp)))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CalibrationError + '_ {
    move |source| CalibrationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Persists `snapshot` at `<store>/<backend>/<timestamp>.json`. Storing the
/// same content twice is a no-op; different content under an existing key
/// is rejected. Writers to one key must be serialized by the caller.
pub fn store_snapshot(store: &Path, snapshot: &CalibrationSnapshot) -> Result<SnapshotKey> {
    snapshot.validate()?;
    check_backend_name(&snapshot.backend)?;
    let key = snapshot.key();
    let path = snapshot_path(store, &key);
    let bytes = snapshot.to_canonical_json();
    if path.exists() {
        let existing = fs::read(&path).map_err(io_err(&path))?;
        if existing == bytes.as_bytes() {
            return Ok(key);
        }
        return Err(CalibrationError::KeyCollision(key));
    }
    let dir = path.parent().expect("snapshot path has a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(".{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampSelector {
    Exact(DateTime<Utc>),
    /// Newest snapshot with timestamp at or before the instant.
    LatestBefore(DateTime<Utc>),
}

impl fmt::Display for TimestampSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exact(t) => write!(f, "exact {}", format_timestamp(t)),
            Self::LatestBefore(t) => write!(f, "latest-before {}", format_timestamp(t)),
        }
    }
}

/// Timestamps of every snapshot stored for `backend`, ascending.
pub fn list_snapshots(store: &Path, backend: &str) -> Result<Vec<DateTime<Utc>>> {
    check_backend_name(backend)?;
    let dir = store.join(backend);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        let name = entry.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".json")) else {
            continue;
        };
        if let Ok(ts) = parse_timestamp(stem) {
            out.push(ts);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_snapshot(store: &Path, backend: &str, selector: TimestampSelector) -> Result<CalibrationSnapshot> {
    let not_found = || CalibrationError::NotFound {
        backend: backend.to_string(),
        selector: selector.to_string(),
    };
    let available = list_snapshots(store, backend)?;
    let ts = match selector {
        TimestampSelector::Exact(t) => available.into_iter().find(|&s| s == t),
        TimestampSelector::LatestBefore(t) => available.into_iter().rev().find(|&s| s <= t),
    }
    .ok_or_else(not_found)?;
    let key = SnapshotKey {
        backend: backend.to_string(),
        timestamp: ts,
    };
    let path = snapshot_path(store, &key);
    let raw = fs::read(&path).map_err(io_err(&path))?;
    Ok(parse_json(&raw)?.snapshot)
}

// Histograms ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    T1,
    T2,
    ReadoutError,
    GateError,
}

impl Property {
    pub const ALL: [Property; 4] = [Self::T1, Self::T2, Self::ReadoutError, Self::GateError];

    pub fn name(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T2 => "t2",
            Self::ReadoutError => "readout_error",
            Self::GateError => "gate_error",
        }
    }

    /// The property's values over every contributing record.
    pub fn values(self, snapshot: &CalibrationSnapshot) -> Vec<f64> {
        match self {
            Self::T1 => snapshot.qubits.iter().map(|q| q.t1_us).collect(),
            Self::T2 => snapshot.qubits.iter().map(|q| q.t2_us).collect(),
            Self::ReadoutError => snapshot.qubits.iter().map(QubitRecord::readout_error).collect(),
            Self::GateError => snapshot.gates.iter().map(|g| g.error).collect(),
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CalibrationError::UnknownProperty(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub property: Property,
    /// `counts.len() + 1` strictly ascending edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub summary: Summary,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV with header `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.bin_edges[i], self.bin_edges[i + 1], c));
        }
        out
    }
}

/// Equal-width histogram of a snapshot property over `[min, max]`.
///
/// Bins are half-open `[lo, hi)` except the last, which is closed. When every
/// value is equal the span is widened to `[v - 0.5, v + 0.5]`.
pub fn empirical_histogram(snapshot: &CalibrationSnapshot, property: Property, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(CalibrationError::ZeroBins);
    }
    let values = property.values(snapshot);
    if values.is_empty() {
        return Err(CalibrationError::PropertyAbsent(property));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let (lo, hi) = if max > min { (min, max) } else { (min - 0.5, max + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);

    let mut counts = vec![0u64; bins];
    for &v in &values {
        let mut i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        // Repair rounding so the edge comparison is authoritative.
        while i > 0 && v < edges[i] {
            i -= 1;
        }
        while i + 1 < bins && v >= edges[i + 1] {
            i += 1;
        }
        counts[i] += 1;
    }
    Ok(Histogram {
        property,
        bin_edges: edges,
        counts,
        summary: Summary {
            mean,
            std: var.sqrt(),
            min,
            max,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    fn qubit(id: usize, t1: f64) -> QubitRecord {
        QubitRecord {
            id,
            t1_us: t1,
            t2_us: t1 / 2.0,
            prob_meas1_prep0: 0.01,
            prob_meas0_prep1: 0.03,
        }
    }

    fn snapshot(t1s: &[f64]) -> CalibrationSnapshot {
        let qubits = t1s.iter().enumerate().map(|(i, &t)| qubit(i, t)).collect();
        CalibrationSnapshot::new("toy", ts("2024-05-01T00:00:00Z"), qubits, vec![]).unwrap()
    }

    fn json_with_qubits(qubits: &str) -> String {
        format!(r#"{{"backend":"toy","timestamp":"2024-05-01T00:00:00Z","qubits":[{qubits}],"gates":[]}}"#)
    }

    #[test]
    fn empty_qubit_list_rejected() {
        let err = parse_snapshot(json_with_qubits("").as_bytes(), &SnapshotFormat::CanonicalJson).unwrap_err();
        assert_eq!(err.to_string(), "empty qubit list");
    }

    #[test]
    fn negative_t2_names_qubit_and_field() {
        let q = r#"{"id":0,"t1_us":10,"t2_us":-5,"prob_meas1_prep0":0,"prob_meas0_prep1":0}"#;
        let err = parse_snapshot(json_with_qubits(q).as_bytes(), &SnapshotFormat::CanonicalJson).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("qubit 0") && msg.contains("t2_us"), "{msg}");
    }

    #[test]
    fn missing_field_is_named() {
        let q = r#"{"id":3,"t2_us":5,"prob_meas1_prep0":0,"prob_meas0_prep1":0}"#;
        let err = parse_snapshot(json_with_qubits(q).as_bytes(), &SnapshotFormat::CanonicalJson).unwrap_err();
        assert!(matches!(err, CalibrationError::MissingField { ref field, .. } if field == "t1_us"));
        assert!(err.to_string().contains("qubit 3"));
    }

    #[test]
    fn malformed_syntax() {
        let err = parse_snapshot(b"{ not json", &SnapshotFormat::CanonicalJson).unwrap_err();
        assert!(matches!(err, CalibrationError::Syntax { .. }));
    }

    #[test]
    fn id_gaps_rejected() {
        let q = r#"{"id":1,"t1_us":10,"t2_us":5,"prob_meas1_prep0":0,"prob_meas0_prep1":0}"#;
        let err = parse_snapshot(json_with_qubits(q).as_bytes(), &SnapshotFormat::CanonicalJson).unwrap_err();
        assert!(err.to_string().contains("without gaps"));
    }

    #[test]
    fn gate_referencing_missing_qubit_rejected() {
        let raw = r#"{"backend":"toy","timestamp":"2024-05-01T00:00:00Z",
            "qubits":[{"id":0,"t1_us":10,"t2_us":5,"prob_meas1_prep0":0,"prob_meas0_prep1":0}],
            "gates":[{"name":"ecr","qubits":[0,1],"duration_ns":500,"error":0.01}]}"#;
        let err = parse_snapshot(raw.as_bytes(), &SnapshotFormat::CanonicalJson).unwrap_err();
        assert!(err.to_string().contains("unknown qubit 1"), "{err}");
    }

    #[test]
    fn unknown_fields_warn_but_parse() {
        let q = r#"{"id":0,"t1_us":10,"t2_us":5,"prob_meas1_prep0":0,"prob_meas0_prep1":0,"frequency_ghz":4.9}"#;
        let parsed = parse_snapshot(json_with_qubits(q).as_bytes(), &SnapshotFormat::CanonicalJson).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("frequency_ghz"));
    }

    #[test]
    fn minute_precision_timestamp() {
        assert_eq!(ts("2024-05-01T00:00Z"), ts("2024-05-01T00:00:00Z"));
        assert_eq!(ts("2024-05-01T02:00:00+02:00"), ts("2024-05-01T00:00:00Z"));
    }

    #[test]
    fn constant_data_histogram() {
        let snap = snapshot(&[250.0; 127]);
        let h = empirical_histogram(&snap, Property::T1, 10).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 127);
        assert_eq!(h.summary.mean, 250.0);
        assert_eq!(h.summary.std, 0.0);
    }

    #[test]
    fn half_open_bins() {
        let snap = snapshot(&[100.0, 200.0, 300.0]);
        let h = empirical_histogram(&snap, Property::T1, 2).unwrap();
        assert_eq!(h.bin_edges, vec![100.0, 200.0, 300.0]);
        // 200 opens the upper bin; 300 is caught by the closed last bin.
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.summary.mean, 200.0);
    }

    #[test]
    fn gate_error_absent() {
        let snap = snapshot(&[1.0]);
        assert!(matches!(
            empirical_histogram(&snap, Property::GateError, 3),
            Err(CalibrationError::PropertyAbsent(Property::GateError))
        ));
        assert!(matches!(
            empirical_histogram(&snap, Property::T1, 0),
            Err(CalibrationError::ZeroBins)
        ));
    }

    #[test]
    fn property_names_round_trip() {
        for p in Property::ALL {
            assert_eq!(p.name().parse::<Property>().unwrap(), p);
        }
        assert!("t3".parse::<Property>().is_err());
    }

    #[test]
    fn store_round_trip_and_collisions() {
        let dir = tempfile::tempdir().unwrap();
        let snap = snapshot(&[120.0, 80.0]);
        let key = store_snapshot(dir.path(), &snap).unwrap();
        assert_eq!(key.to_string(), "toy@2024-05-01T00:00:00Z");
        let back = load_snapshot(dir.path(), "toy", TimestampSelector::Exact(snap.timestamp)).unwrap();
        assert_eq!(back, snap);
        // Same content is idempotent.
        store_snapshot(dir.path(), &snap).unwrap();
        let mut other = snap.clone();
        other.qubits[0].t1_us = 121.0;
        assert!(matches!(
            store_snapshot(dir.path(), &other),
            Err(CalibrationError::KeyCollision(_))
        ));
    }

    #[test]
    fn latest_before_selection() {
        let dir = tempfile::tempdir().unwrap();
        let t = ts("2024-05-01T12:00:00Z");
        let hour = chrono::Duration::hours(1);
        for when in [t - hour, t + hour] {
            let mut s = snapshot(&[100.0]);
            s.timestamp = when;
            store_snapshot(dir.path(), &s).unwrap();
        }
        let got = load_snapshot(dir.path(), "toy", TimestampSelector::LatestBefore(t)).unwrap();
        assert_eq!(got.timestamp, t - hour);
        assert!(matches!(
            load_snapshot(dir.path(), "toy", TimestampSelector::Exact(t)),
            Err(CalibrationError::NotFound { .. })
        ));
        assert!(matches!(
            load_snapshot(dir.path(), "toy", TimestampSelector::LatestBefore(t - hour * 2)),
            Err(CalibrationError::NotFound { .. })
        ));
    }

    #[test]
    fn key_parse() {
        let key: SnapshotKey = "ibm_x@2024-05-01T00:00:00Z".parse().unwrap();
        assert_eq!(key.backend, "ibm_x");
        assert!("no-at-sign".parse::<SnapshotKey>().is_err());
    }

    #[test]
    fn csv_import() {
        let raw = "\
# backend: ibm_toy
# timestamp: 2024-05-01T00:00:00Z
Qubit,T1 (us),T2 (us),Frequency (GHz),Prob meas0 prep1 ,Prob meas1 prep0 ,√x (sx) error ,Pauli-X error ,RZ error ,Single-qubit gate length (ns),ECR error ,Gate time (ns)
0,250.5,180.25,4.8,0.02,0.01,2.5e-4,2.5e-4,0,56.889,0_1:7.1e-3,0_1:533.333
1,300,100,4.9,0.03,0.015,3.0e-4,3.0e-4,0,56.889,1_0:7.1e-3,1_0:533.333
";
        let fmt = SnapshotFormat::CalibrationCsv {
            backend: None,
            timestamp: None,
        };
        let parsed = parse_snapshot(raw.as_bytes(), &fmt).unwrap();
        let s = parsed.snapshot;
        assert_eq!(s.backend, "ibm_toy");
        assert_eq!(s.qubits.len(), 2);
        assert_eq!(s.qubits[0].t1_us, 250.5);
        assert_eq!(s.qubits[0].prob_meas0_prep1, 0.02);
        assert_eq!(s.qubits[0].prob_meas1_prep0, 0.01);
        let ecr: Vec<_> = s.gates.iter().filter(|g| g.name == "ecr").collect();
        assert_eq!(ecr.len(), 2);
        assert_eq!(ecr[0].duration_ns, 533.333);
        assert!(s.gates.iter().any(|g| g.name == "sx" && g.duration_ns == 56.889));
        assert!(s.gates.iter().any(|g| g.name == "rz" && g.duration_ns == 0.0));
        assert!(parsed.warnings.iter().any(|w| w.contains("frequency")));
    }

    #[test]
    fn csv_requires_metadata() {
        let raw = "Qubit,T1 (us),T2 (us),Prob meas0 prep1,Prob meas1 prep0\n0,1,1,0,0\n";
        let fmt = SnapshotFormat::CalibrationCsv {
            backend: None,
            timestamp: None,
        };
        assert!(matches!(
            parse_snapshot(raw.as_bytes(), &fmt),
            Err(CalibrationError::MissingField { ref field, .. }) if field == "backend"
        ));
        let fmt = SnapshotFormat::CalibrationCsv {
            backend: Some("b".into()),
            timestamp: Some("2024-01-01T00:00:00Z".into()),
        };
        assert_eq!(parse_snapshot(raw.as_bytes(), &fmt).unwrap().snapshot.qubits.len(), 1);
    }
}
