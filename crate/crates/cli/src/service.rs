//! Local HTTP service: asynchronous design calibration, operating
//! characteristics and live audit sessions.
//!
//! With a state directory, designs are stored as `designs/{id}.json` and
//! every session as an append-only event log `sessions/{id}.jsonl`. A
//! restarted service folds the logs back into identical sessions.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use seqaudit_core::io::{self as sio, Artifact, OcExport, SessionExport};
use seqaudit_core::{
    calibrate_with_progress, new_session, oc_curve, BoundarySchedule, DesignConfig, Error as CoreError, Session, Status,
};

use crate::parse_grid;

const DEFAULT_OC_REPS: u32 = 1_000;

/// Error response body: `{"error": {"code", "message"}}`, plus the current
/// session state on sequence conflicts.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    state: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            state: None,
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    fn invalid(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": {"code": self.code, "message": self.message}});
        if let Some(state) = self.state {
            body["state"] = state;
        }
        (self.status, axum::Json(body)).into_response()
    }
}

type ApiResult<T = Response> = Result<T, ApiError>;

enum DesignState {
    Running,
    Done(Arc<BoundarySchedule>),
    Failed(String),
}

struct Design {
    id: Uuid,
    config: DesignConfig,
    created_unix: u64,
    progress: AtomicU64,
    state: RwLock<DesignState>,
}

impl Design {
    fn progress(&self) -> f64 {
        f64::from_bits(self.progress.load(Ordering::Relaxed))
    }

    fn status_json(&self) -> Value {
        let state = self.state.read().unwrap();
        let (label, progress, error) = match &*state {
            DesignState::Running => ("running", self.progress(), None),
            DesignState::Done(_) => ("done", 1.0, None),
            DesignState::Failed(e) => ("failed", self.progress(), Some(e.clone())),
        };
        json!({"id": self.id, "state": label, "progress": progress, "error": error})
    }

    fn schedule(&self) -> ApiResult<Arc<BoundarySchedule>> {
        match &*self.state.read().unwrap() {
            DesignState::Done(s) => Ok(Arc::clone(s)),
            DesignState::Running => Err(ApiError::new(
                StatusCode::CONFLICT,
                "design_not_ready",
                format!("design {} is still calibrating", self.id),
            )),
            DesignState::Failed(e) => Err(ApiError::invalid("calibration_failed", e.clone())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DesignRecord {
    id: Uuid,
    created_unix: u64,
    config: DesignConfig,
    schedule: Option<Value>,
    error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Open { design_id: Uuid, created_unix: u64 },
    Observe { seq: u64, x: u8 },
    Undo { seq: u64 },
}

struct SessionEntry {
    id: Uuid,
    design_id: Uuid,
    created_unix: u64,
    schedule: Arc<BoundarySchedule>,
    session: Session,
    seq: u64,
    log: Option<PathBuf>,
}

impl SessionEntry {
    fn view(&self) -> Value {
        let s = &self.session;
        let outcome = s.outcome();
        json!({
            "id": self.id,
            "design_id": self.design_id,
            "created_unix": self.created_unix,
            "seq": self.seq,
            "n": self.schedule.n(),
            "t": s.stage(),
            "s_t": s.count(),
            "p_hat": s.rate(),
            "status": s.status(),
            "tau": outcome.map(|o| o.tau),
            "decision": outcome.map(|o| o.decision),
            "decision_source": outcome.map(|o| o.source),
            "history": s.history(),
            "thresholds": s.trace(),
        })
    }

    fn append(&self, event: &Event) -> std::io::Result<()> {
        let Some(path) = &self.log else { return Ok(()) };
        let mut file = OpenOptions::new().append(true).open(path)?;
        append_event(&mut file, event)
    }

    fn apply(&mut self, event: Event) -> seqaudit_core::Result<()> {
        match event {
            Event::Open { .. } => return Ok(()),
            Event::Observe { x, .. } => {
                self.session.observe(x)?;
            }
            Event::Undo { .. } => {
                self.session.undo()?;
            }
        }
        self.seq += 1;
        Ok(())
    }
}

fn append_event(file: &mut File, event: &Event) -> std::io::Result<()> {
    let mut line = serde_json::to_string(event)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.sync_data()
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Shared service state.
pub struct AppState {
    designs: RwLock<HashMap<Uuid, Arc<Design>>>,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<SessionEntry>>>>,
    state_dir: Option<PathBuf>,
}

impl AppState {
    /// In-memory state without persistence.
    pub fn ephemeral() -> Arc<Self> {
        Arc::new(Self {
            designs: RwLock::default(),
            sessions: RwLock::default(),
            state_dir: None,
        })
    }

    /// Opens (or creates) a state directory and restores its designs and
    /// sessions. Designs that were still calibrating are restarted.
    pub fn open(dir: &Path) -> std::io::Result<Arc<Self>> {
        fs::create_dir_all(dir.join("designs"))?;
        fs::create_dir_all(dir.join("sessions"))?;
        let state = Arc::new(Self {
            designs: RwLock::default(),
            sessions: RwLock::default(),
            state_dir: Some(dir.to_path_buf()),
        });
        for path in sorted_entries(&dir.join("designs"), "json")? {
            match state.restore_design(&path) {
                Ok(()) => {}
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        for path in sorted_entries(&dir.join("sessions"), "jsonl")? {
            match state.restore_session(&path) {
                Ok(()) => {}
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(state)
    }

    fn restore_design(self: &Arc<Self>, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
        let record: DesignRecord = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let state = match (&record.schedule, &record.error) {
            (Some(v), _) => {
                let schedule: BoundarySchedule = sio::artifact_from_str(&v.to_string()).map_err(|e| e.to_string())?;
                DesignState::Done(Arc::new(schedule))
            }
            (None, Some(e)) => DesignState::Failed(e.clone()),
            (None, None) => DesignState::Running,
        };
        let running = matches!(state, DesignState::Running);
        let design = Arc::new(Design {
            id: record.id,
            config: record.config,
            created_unix: record.created_unix,
            progress: AtomicU64::new(0f64.to_bits()),
            state: RwLock::new(state),
        });
        self.designs.write().unwrap().insert(design.id, Arc::clone(&design));
        if running {
            log::info!("restarting calibration of design {}", design.id);
            self.spawn_calibration(design);
        }
        Ok(())
    }

    fn restore_session(&self, path: &Path) -> Result<(), String> {
        let id: Uuid = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or("file name is not a session id")?;
        let file = File::open(path).map_err(|e| e.to_string())?;
        let mut lines = BufReader::new(file).lines();
        let first = lines.next().ok_or("empty event log")?.map_err(|e| e.to_string())?;
        let Event::Open {
            design_id,
            created_unix,
        } = serde_json::from_str(&first).map_err(|e| e.to_string())?
        else {
            return Err("event log does not start with an open event".into());
        };
        let design = self.design(design_id).map_err(|e| e.message)?;
        let schedule = design.schedule().map_err(|e| e.message)?;
        let mut entry = SessionEntry {
            id,
            design_id,
            created_unix,
            session: new_session(&schedule, schedule.config.variant).map_err(|e| e.to_string())?,
            schedule,
            seq: 0,
            log: Some(path.to_path_buf()),
        };
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            // A torn final line is an event that was never acknowledged.
            let Ok(event) = serde_json::from_str::<Event>(&line) else {
                log::warn!("{}: ignoring unreadable event on line {}", path.display(), i + 2);
                break;
            };
            entry.apply(event).map_err(|e| format!("line {}: {e}", i + 2))?;
        }
        self.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(entry)));
        Ok(())
    }

    fn design(&self, id: Uuid) -> ApiResult<Arc<Design>> {
        self.designs
            .read()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("design", &id.to_string()))
    }

    fn session(&self, id: Uuid) -> ApiResult<Arc<Mutex<SessionEntry>>> {
        self.sessions
            .read()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", &id.to_string()))
    }

    fn persist_design(&self, design: &Design, state: &DesignState) -> Result<(), CoreError> {
        let Some(dir) = &self.state_dir else { return Ok(()) };
        let (schedule, error) = match state {
            DesignState::Running => (None, None),
            DesignState::Done(s) => (Some(serde_json::from_str(&sio::artifact_to_string(&**s)?)?), None),
            DesignState::Failed(e) => (None, Some(e.clone())),
        };
        let record = DesignRecord {
            id: design.id,
            created_unix: design.created_unix,
            config: design.config.clone(),
            schedule,
            error,
        };
        let path = dir.join("designs").join(format!("{}.json", design.id));
        sio::write_atomic(&path, sio::canonical_json(&record)?.as_bytes())
    }

    fn spawn_calibration(self: &Arc<Self>, design: Arc<Design>) {
        let state = Arc::clone(self);
        std::thread::spawn(move || {
            let result = calibrate_with_progress(&design.config, &|f| {
                design.progress.store(f.to_bits(), Ordering::Relaxed);
            });
            let finished = match result {
                Ok(s) => DesignState::Done(Arc::new(s)),
                Err(e) => {
                    log::warn!("calibration of design {} failed: {e}", design.id);
                    DesignState::Failed(e.to_string())
                }
            };
            // Published only after it is on disk, so sessions never refer to
            // a design a restart would not find.
            if let Err(e) = state.persist_design(&design, &finished) {
                log::error!("cannot persist design {}: {e}", design.id);
            }
            *design.state.write().unwrap() = finished;
        });
    }
}

fn sorted_entries(dir: &Path, ext: &str) -> std::io::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    paths.sort();
    Ok(paths)
}

fn parse_id(raw: &str, what: &str) -> ApiResult<Uuid> {
    raw.parse().map_err(|_| ApiError::not_found(what, raw))
}

fn parse_body(body: &Bytes) -> ApiResult<serde_json::Map<String, Value>> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::invalid("invalid_body", "request body must be a JSON object")),
        Err(e) => Err(ApiError::invalid("invalid_body", format!("malformed JSON: {e}"))),
    }
}

fn artifact_response<T: Artifact>(artifact: &T) -> ApiResult {
    let text = sio::artifact_to_string(artifact).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

fn core_error(e: CoreError) -> ApiError {
    match e {
        CoreError::Config(c) => ApiError::invalid("invalid_config", c.to_string()),
        CoreError::SessionDecided { .. } => ApiError::invalid("session_decided", "session decided"),
        CoreError::EmptyHistory => ApiError::invalid("empty_history", e.to_string()),
        CoreError::SeedReuse(_) => ApiError::invalid("seed_reuse", e.to_string()),
        CoreError::InvalidArgument(_) => ApiError::invalid("invalid_argument", e.to_string()),
        other => ApiError::internal(other),
    }
}

async fn create_design(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let body = parse_body(&body)?;
    let config = DesignConfig::from_json_value(&Value::Object(body))
        .map_err(|e| ApiError::invalid("invalid_config", e.to_string()))?;
    let design = Arc::new(Design {
        id: Uuid::new_v4(),
        config,
        created_unix: now_unix(),
        progress: AtomicU64::new(0f64.to_bits()),
        state: RwLock::new(DesignState::Running),
    });
    state
        .persist_design(&design, &DesignState::Running)
        .map_err(ApiError::internal)?;
    state.designs.write().unwrap().insert(design.id, Arc::clone(&design));
    state.spawn_calibration(Arc::clone(&design));
    Ok((StatusCode::ACCEPTED, axum::Json(design.status_json())).into_response())
}

async fn design_status(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let design = state.design(parse_id(&id, "design")?)?;
    Ok(axum::Json(design.status_json()).into_response())
}

async fn get_design(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let design = state.design(parse_id(&id, "design")?)?;
    let schedule = match design.schedule() {
        Ok(s) => s,
        Err(e) if e.status == StatusCode::CONFLICT => {
            return Ok((StatusCode::ACCEPTED, axum::Json(design.status_json())).into_response())
        }
        Err(e) => return Err(e),
    };
    let text = sio::artifact_to_string(&*schedule).map_err(ApiError::internal)?;
    let rows: Vec<Value> = schedule
        .rows()
        .iter()
        .map(|r| {
            json!({
                "t": r.t,
                "lower": r.lower,
                "upper": r.upper,
                "kappa_lower": r.kappa_lower,
                "kappa_upper": r.kappa_upper,
                "cum_alpha": sio::prob::format(r.cum_alpha),
                "cum_beta": sio::prob::format(r.cum_beta),
            })
        })
        .collect();
    let mut body = design.status_json();
    body["schedule"] = serde_json::from_str(&text).map_err(ApiError::internal)?;
    body["rows"] = Value::Array(rows);
    Ok(axum::Json(body).into_response())
}

async fn design_oc(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult {
    let design = state.design(parse_id(&id, "design")?)?;
    let schedule = match design.schedule() {
        Ok(s) => s,
        Err(e) if e.status == StatusCode::CONFLICT => {
            return Ok((StatusCode::ACCEPTED, axum::Json(design.status_json())).into_response())
        }
        Err(e) => return Err(e),
    };
    let reps = match query.get("reps") {
        None => DEFAULT_OC_REPS,
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::invalid("invalid_query", format!("reps: `{v}` is not a positive integer")))?,
    };
    let seed = match query.get("seed") {
        None => schedule.config.seed.wrapping_add(1),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::invalid("invalid_query", format!("seed: `{v}` is not an unsigned integer")))?,
    };
    let grid = parse_grid(query.get("grid").map_or("all", String::as_str), schedule.n())
        .map_err(|e| ApiError::invalid("invalid_query", format!("grid: {e}")))?;
    let export = tokio::task::spawn_blocking(move || {
        oc_curve(&schedule, &grid, reps, seed).map(|points| OcExport::new(&schedule, seed, reps, points))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(core_error)?;
    artifact_response(&export)
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let body = parse_body(&body)?;
    let raw = body
        .get("design_id")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::invalid("invalid_body", "design_id: expected a design id string"))?;
    let design = state.design(parse_id(raw, "design")?)?;
    let schedule = design.schedule()?;
    let id = Uuid::new_v4();
    let created_unix = now_unix();
    let session = new_session(&schedule, schedule.config.variant).map_err(core_error)?;
    let log = match &state.state_dir {
        None => None,
        Some(dir) => {
            let path = dir.join("sessions").join(format!("{id}.jsonl"));
            let mut file = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .map_err(ApiError::internal)?;
            let open = Event::Open {
                design_id: design.id,
                created_unix,
            };
            append_event(&mut file, &open).map_err(ApiError::internal)?;
            Some(path)
        }
    };
    let entry = SessionEntry {
        id,
        design_id: design.id,
        created_unix,
        session,
        schedule,
        seq: 0,
        log,
    };
    let view = entry.view();
    state.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(entry)));
    Ok((StatusCode::CREATED, axum::Json(view)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let entry = state.session(parse_id(&id, "session")?)?;
    let view = entry.lock().unwrap().view();
    Ok(axum::Json(view).into_response())
}

fn expected_seq(body: &serde_json::Map<String, Value>) -> ApiResult<u64> {
    body.get("expected_seq")
        .and_then(Value::as_u64)
        .ok_or_else(|| ApiError::invalid("invalid_body", "expected_seq: expected a non-negative integer"))
}

fn check_seq(entry: &SessionEntry, expected: u64) -> ApiResult<()> {
    if expected == entry.seq {
        return Ok(());
    }
    let mut e = ApiError::new(
        StatusCode::CONFLICT,
        "sequence_conflict",
        format!(
            "expected_seq {expected} does not match the current sequence number {}",
            entry.seq
        ),
    );
    e.state = Some(entry.view());
    Err(e)
}

async fn observe(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let entry = state.session(parse_id(&id, "session")?)?;
    let body = parse_body(&body)?;
    let expected = expected_seq(&body)?;
    let mut entry = entry.lock().unwrap();
    check_seq(&entry, expected)?;
    if entry.session.status() != Status::Continue {
        return Err(ApiError::invalid("session_decided", "session decided"));
    }
    let x = match body.get("x").and_then(Value::as_u64) {
        Some(x @ (0 | 1)) => x as u8,
        _ => return Err(ApiError::invalid("invalid_observation", "x: expected 0 or 1")),
    };
    let event = Event::Observe { seq: entry.seq + 1, x };
    entry.append(&event).map_err(ApiError::internal)?;
    entry.apply(event).map_err(core_error)?;
    Ok(axum::Json(entry.view()).into_response())
}

async fn undo(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let entry = state.session(parse_id(&id, "session")?)?;
    let body = parse_body(&body)?;
    let expected = expected_seq(&body)?;
    let mut entry = entry.lock().unwrap();
    check_seq(&entry, expected)?;
    if entry.session.stage() == 0 {
        return Err(core_error(CoreError::EmptyHistory));
    }
    let event = Event::Undo { seq: entry.seq + 1 };
    entry.append(&event).map_err(ApiError::internal)?;
    entry.apply(event).map_err(core_error)?;
    Ok(axum::Json(entry.view()).into_response())
}

async fn export_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let entry = state.session(parse_id(&id, "session")?)?;
    let entry = entry.lock().unwrap();
    artifact_response(&SessionExport::new(&entry.schedule, &entry.session))
}

async fn no_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/designs", post(create_design))
        .route("/designs/{id}", get(get_design))
        .route("/designs/{id}/status", get(design_status))
        .route("/designs/{id}/oc", get(design_oc))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/observe", post(observe))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/export", get(export_session))
        .fallback(no_route)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
