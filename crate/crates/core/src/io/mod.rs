//! File formats: canonical JSON artifacts, CSV exports, config and
//! population loading.

pub mod prob;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::calibration::{Backend, BoundarySchedule, DesignConfig, Provenance};
use crate::error::{ConfigError, Error, Result};
use crate::evaluation::{OcPoint, ReplaySummary};
use crate::population::FinitePopulation;
use crate::procedure::{Decision, DecisionSource, Session, StageRow, Status};

/// Version string embedded in every JSON artifact.
pub const FORMAT_VERSION: &str = "seqaudit/1";

/// Serializes `value` as pretty JSON with recursively sorted keys and a
/// trailing newline.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let value = sort_keys(serde_json::to_value(value)?);
    let mut out = serde_json::to_string_pretty(&value)?;
    out.push('\n');
    Ok(out)
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(
                entries
                    .into_iter()
                    .map(|(k, v)| (k, sort_keys(v)))
                    .collect::<Map<_, _>>(),
            )
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// A JSON artifact with an embedded kind and format version.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Integrity checks run after loading.
    fn check(&self) -> Result<()> {
        Ok(())
    }
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format_version: &'static str,
    kind: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

/// Canonical JSON text of an artifact.
pub fn artifact_to_string<T: Artifact>(artifact: &T) -> Result<String> {
    canonical_json(&EnvelopeRef {
        format_version: FORMAT_VERSION,
        kind: T::KIND,
        body: artifact,
    })
}

/// Parses an artifact, rejecting other versions or kinds and failing its
/// integrity check.
pub fn artifact_from_str<T: Artifact>(text: &str) -> Result<T> {
    let mut value: Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument("artifact must be a JSON object".into()))?;
    let found = match obj.remove("format_version") {
        Some(Value::String(s)) => s,
        Some(other) => other.to_string(),
        None => "<missing>".to_string(),
    };
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION.to_string(),
        });
    }
    match obj.remove("kind") {
        Some(Value::String(kind)) if kind == T::KIND => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "expected a {} artifact, found {}",
                T::KIND,
                other.map_or_else(|| "none".to_string(), |v| v.to_string())
            )))
        }
    }
    let artifact: T = serde_json::from_value(value)?;
    artifact.check()?;
    Ok(artifact)
}

pub fn save_artifact<T: Artifact>(path: &Path, artifact: &T) -> Result<()> {
    write_atomic(path, artifact_to_string(artifact)?.as_bytes())
}

pub fn load_artifact<T: Artifact>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    artifact_from_str(&text).map_err(|e| match e {
        Error::Json(e) => data_err(path, e),
        other => other,
    })
}

fn check_hash(config: &DesignConfig, recorded: &str) -> Result<()> {
    let computed = config.hash();
    if computed == recorded {
        Ok(())
    } else {
        Err(Error::HashMismatch {
            recorded: recorded.to_string(),
            computed,
        })
    }
}

impl Artifact for BoundarySchedule {
    const KIND: &'static str = "schedule";

    fn check(&self) -> Result<()> {
        check_hash(&self.config, &self.provenance.config_hash)?;
        self.config.validate()?;
        self.rule.validate()?;
        let stages = self.n().saturating_sub(1) as usize;
        if self.cum_alpha.len() != stages || self.cum_beta.len() != stages {
            return Err(Error::InvalidArgument(format!("ledger must have {stages} entries")));
        }
        Ok(())
    }
}

pub fn save_schedule(path: &Path, schedule: &BoundarySchedule) -> Result<()> {
    save_artifact(path, schedule)
}

pub fn load_schedule(path: &Path) -> Result<BoundarySchedule> {
    load_artifact(path)
}

/// Operating characteristics over a grid, as written by `oc --out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcExport {
    pub config: DesignConfig,
    pub config_hash: String,
    pub seed: u64,
    pub reps: u32,
    pub points: Vec<OcPoint>,
}

impl OcExport {
    pub fn new(schedule: &BoundarySchedule, seed: u64, reps: u32, points: Vec<OcPoint>) -> Self {
        Self {
            config: schedule.config.clone(),
            config_hash: schedule.provenance.config_hash.clone(),
            seed,
            reps,
            points,
        }
    }
}

impl Artifact for OcExport {
    const KIND: &'static str = "oc";

    fn check(&self) -> Result<()> {
        check_hash(&self.config, &self.config_hash)
    }
}

/// Replay summary with its design reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayExport {
    pub config: DesignConfig,
    pub config_hash: String,
    pub seed: u64,
    pub summary: ReplaySummary,
}

impl ReplayExport {
    pub fn new(schedule: &BoundarySchedule, seed: u64, summary: ReplaySummary) -> Self {
        Self {
            config: schedule.config.clone(),
            config_hash: schedule.provenance.config_hash.clone(),
            seed,
            summary,
        }
    }
}

impl Artifact for ReplayExport {
    const KIND: &'static str = "replay";

    fn check(&self) -> Result<()> {
        check_hash(&self.config, &self.config_hash)
    }
}

/// Snapshot of a live or finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub config: DesignConfig,
    pub provenance: Provenance,
    pub history: Vec<u8>,
    pub trace: Vec<StageRow>,
    pub status: Status,
    pub tau: Option<u32>,
    pub decision: Option<Decision>,
    pub decision_source: Option<DecisionSource>,
}

impl SessionExport {
    pub fn new(schedule: &BoundarySchedule, session: &Session) -> Self {
        let outcome = session.outcome();
        Self {
            config: schedule.config.clone(),
            provenance: schedule.provenance.clone(),
            history: session.history().to_vec(),
            trace: session.trace(),
            status: session.status(),
            tau: outcome.map(|o| o.tau),
            decision: outcome.map(|o| o.decision),
            decision_source: outcome.map(|o| o.source),
        }
    }
}

impl Artifact for SessionExport {
    const KIND: &'static str = "session";

    fn check(&self) -> Result<()> {
        check_hash(&self.config, &self.provenance.config_hash)
    }
}

/// Everything needed to regenerate a run's random draws and artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: DesignConfig,
    pub config_hash: String,
    pub seed: u64,
    pub backend: Backend,
    pub tool_version: String,
    /// Artifact kind to path.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds since the Unix epoch when the manifest was written.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(config: &DesignConfig) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            backend: config.backend,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
            created_unix,
        }
    }

    pub fn with_artifact(mut self, kind: &str, path: impl Into<String>) -> Self {
        self.artifacts.insert(kind.to_string(), path.into());
        self
    }
}

impl Artifact for RunManifest {
    const KIND: &'static str = "manifest";

    fn check(&self) -> Result<()> {
        check_hash(&self.config, &self.config_hash)
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Parses config text; `toml` selects TOML, otherwise JSON.
pub fn parse_config(text: &str, toml: bool) -> Result<DesignConfig> {
    let value: Value = if toml {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?
    } else {
        serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?
    };
    Ok(DesignConfig::from_json_value(&value)?)
}

/// Loads a TOML (`.toml`) or JSON config file.
pub fn load_config(path: &Path) -> Result<DesignConfig> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    parse_config(&text, toml)
}

/// Loads a population of 0/1 indicators from CSV.
///
/// A header row is detected when the first field of the selected column is
/// not a number. Without `column` the file must have exactly one column.
pub fn load_population_csv(path: &Path, column: Option<&str>) -> Result<FinitePopulation> {
    let file = fs::File::open(path).map_err(|e| data_err(path, e))?;
    read_population(file, column).map_err(|message| Error::Data {
        path: path.display().to_string(),
        message,
    })
}

/// [`load_population_csv`] over any reader; errors are plain messages.
pub fn read_population(
    reader: impl std::io::Read,
    column: Option<&str>,
) -> std::result::Result<FinitePopulation, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let first = match records.next() {
        None => return Err("empty population".into()),
        Some(r) => r.map_err(|e| e.to_string())?,
    };
    let looks_numeric = |s: &str| s.parse::<f64>().is_ok();
    let header = !first.is_empty() && !first.iter().all(looks_numeric);
    let index = match column {
        Some(name) => {
            if !header {
                return Err(format!("column `{name}` requested but the file has no header row"));
            }
            first
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| format!("no column named `{name}`"))?
        }
        None if first.len() == 1 => 0,
        None => return Err(format!("file has {} columns; select one by name", first.len())),
    };

    let mut items = Vec::new();
    let mut push = |record: &csv::StringRecord| -> std::result::Result<(), String> {
        let line = record.position().map_or(0, |p| p.line());
        match record.get(index) {
            Some("0") => items.push(0),
            Some("1") => items.push(1),
            Some(v) => return Err(format!("line {line}: value `{v}` is not 0 or 1")),
            None => return Err(format!("line {line}: missing column {}", index + 1)),
        }
        Ok(())
    };
    if !header {
        push(&first)?;
    }
    for record in records {
        let record = record.map_err(|e| e.to_string())?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        push(&record)?;
    }
    if items.is_empty() {
        return Err("empty population".into());
    }
    FinitePopulation::from_items(items).map_err(|e| e.to_string())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Columns `t,L_t,U_t,kappa_lower,kappa_upper,cum_alpha_hat,cum_beta_hat`.
pub fn write_schedule_csv(schedule: &BoundarySchedule, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t",
        "L_t",
        "U_t",
        "kappa_lower",
        "kappa_upper",
        "cum_alpha_hat",
        "cum_beta_hat",
    ])
    .map_err(csv_err)?;
    for row in schedule.rows() {
        w.write_record([
            row.t.to_string(),
            row.lower.to_string(),
            row.upper.to_string(),
            row.kappa_lower.to_string(),
            row.kappa_upper.to_string(),
            prob::format(row.cum_alpha),
            prob::format(row.cum_beta),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `m,p,accept_k_prob,error_prob,expected_tau` and their standard
/// errors.
pub fn write_oc_csv(points: &[OcPoint], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "m",
        "p",
        "accept_k_prob",
        "error_prob",
        "expected_tau",
        "accept_k_se",
        "error_se",
        "tau_se",
    ])
    .map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.m.to_string(),
            p.p.to_string(),
            prob::format(p.accept_k_prob),
            prob::format(p.error_prob),
            p.expected_tau.to_string(),
            prob::format(p.accept_k_se),
            prob::format(p.error_se),
            p.tau_se.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `tau,count`, one row per observed stopping stage.
pub fn write_histogram_csv(summary: &ReplaySummary, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "count"]).map_err(csv_err)?;
    for bin in &summary.tau_histogram {
        w.write_record([bin.tau.to_string(), bin.count.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes CSV produced by `f` to `path` atomically.
pub fn save_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}
