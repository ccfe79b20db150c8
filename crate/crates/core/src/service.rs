//! Server-held editing sessions behind a small JSON protocol.
//!
//! ```text
//! POST   /sessions                 {time_steps, pitch_count, pitch_offset, sampler_config?, notes?}
//! POST   /sessions/{id}/edit       {t, p, protect}
//! POST   /sessions/{id}/step       {count, temperature?, max_removals?}
//! POST   /sessions/{id}/undo
//! POST   /sessions/{id}/redo
//! GET    /sessions/{id}/roll
//! GET    /sessions/{id}/transcript
//! GET    /sessions/{id}/export.mid
//! DELETE /sessions/{id}
//! ```
//!
//! [`SessionService::handle`] does all the work and knows nothing about
//! sockets; [`serve`] puts it behind HTTP.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::midi::{export_midi, QuantizeConfig, DEFAULT_TEMPO_BPM};
use crate::roll::{Cell, EditEvent, PianoRoll};
use crate::sampler::{transcript_jsonl, EditSession, EventKind, SamplerConfig};
use crate::scorer::Scorer;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);
/// Largest `count` accepted by one step request.
pub const MAX_STEPS_PER_REQUEST: usize = 10_000;

pub type SharedScorer = Arc<dyn Scorer + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    /// Present on every response that reflects a session's state.
    pub revision: Option<u64>,
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, revision: Option<u64>, v: &Value) -> Self {
        Self {
            status,
            content_type: "application/json",
            revision,
            body: serde_json::to_vec(v).expect("JSON values serialize"),
        }
    }

    fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self::json(
            status,
            None,
            &json!({"error": {"code": code, "message": message.into()}}),
        )
    }

    pub fn json_body(&self) -> Result<Value> {
        Ok(serde_json::from_slice(&self.body)?)
    }
}

fn error_response(e: &Error) -> Response {
    let (status, code) = match e {
        Error::NotFound(_) => (404, "not_found"),
        Error::StackEmpty(_) => (409, "stack_empty"),
        Error::NoLegalEvent => (409, "no_legal_event"),
        Error::Bounds { .. } => (422, "bounds"),
        Error::Shape(_) => (422, "shape"),
        Error::Config(_) => (400, "config"),
        Error::Json(_) => (400, "bad_request"),
        Error::Numeric { .. } => (500, "model"),
        _ => (500, "internal"),
    };
    Response::error(status, code, e.to_string())
}

pub struct SessionRecord {
    pub id: String,
    pub session: EditSession,
    pub config: SamplerConfig,
    pub revision: u64,
    pub created: Instant,
    pub last_used: Instant,
    rng: ChaCha8Rng,
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    time_steps: usize,
    pitch_count: usize,
    pitch_offset: u8,
    #[serde(default)]
    sampler_config: SamplerConfig,
    #[serde(default)]
    notes: Vec<Cell>,
}

#[derive(Debug, Deserialize)]
struct EditRequest {
    t: usize,
    p: usize,
    #[serde(default)]
    protect: bool,
}

#[derive(Debug, Deserialize)]
struct StepRequest {
    #[serde(default = "one")]
    count: usize,
    temperature: Option<f64>,
    max_removals: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize)]
struct StepEvent {
    t: usize,
    p: usize,
    kind: EventKind,
    logprob: f64,
}

type Slot = Arc<Mutex<SessionRecord>>;

/// Sessions keyed by id. Requests on different sessions run concurrently;
/// requests on one session are serialized by its lock.
pub struct SessionService {
    model: SharedScorer,
    sessions: Mutex<HashMap<String, Slot>>,
    idle_timeout: Duration,
    tempo_bpm: f64,
    steps_per_bar: usize,
}

impl SessionService {
    pub fn new(model: SharedScorer) -> Self {
        Self {
            model,
            sessions: Mutex::new(HashMap::new()),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            tempo_bpm: DEFAULT_TEMPO_BPM,
            steps_per_bar: QuantizeConfig::default().steps_per_bar,
        }
    }

    pub fn with_idle_timeout(mut self, timeout: Duration) -> Self {
        self.idle_timeout = timeout;
        self
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }

    /// Drop sessions idle for longer than the timeout as of `now`.
    pub fn reap_idle(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().expect("session map lock");
        let before = map.len();
        map.retain(|_, slot| match slot.try_lock() {
            Ok(rec) => now.saturating_duration_since(rec.last_used) <= self.idle_timeout,
            // busy sessions are in use
            Err(_) => true,
        });
        before - map.len()
    }

    fn slot(&self, id: &str) -> Result<Slot> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Dispatch one request.
    pub fn handle(&self, method: &str, path: &str, body: &[u8]) -> Response {
        self.reap_idle(Instant::now());
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        let result = match (method, parts.as_slice()) {
            ("GET", ["health"]) => Ok(Response::json(200, None, &json!({"status": "ok"}))),
            ("POST", ["sessions"]) => self.create(body),
            ("POST", ["sessions", id, "edit"]) => self.with_session(id, |rec| edit(rec, body)),
            ("POST", ["sessions", id, "step"]) => self.with_session(id, |rec| self.step(rec, body)),
            ("POST", ["sessions", id, "undo"]) => self.with_session(id, |rec| undo_redo(rec, true)),
            ("POST", ["sessions", id, "redo"]) => self.with_session(id, |rec| undo_redo(rec, false)),
            ("GET", ["sessions", id, "roll"]) => self.with_session(id, |rec| {
                Ok(Response::json(
                    200,
                    Some(rec.revision),
                    &roll_value(rec.session.current()),
                ))
            }),
            ("GET", ["sessions", id, "transcript"]) => self.with_session(id, |rec| {
                Ok(Response {
                    status: 200,
                    content_type: "application/x-ndjson",
                    revision: Some(rec.revision),
                    body: transcript_jsonl(rec.session.transcript()).into_bytes(),
                })
            }),
            ("GET", ["sessions", id, "export.mid"]) => self.with_session(id, |rec| self.export(rec)),
            ("DELETE", ["sessions", id]) => self.delete(id),
            (_, ["sessions", ..]) | (_, ["health"]) => {
                Ok(Response::error(405, "method_not_allowed", format!("{method} {path}")))
            }
            _ => Ok(Response::error(404, "not_found", format!("no route for {path}"))),
        };
        result.unwrap_or_else(|e| error_response(&e))
    }

    fn with_session(&self, id: &str, f: impl FnOnce(&mut SessionRecord) -> Result<Response>) -> Result<Response> {
        let slot = self.slot(id)?;
        let mut rec = slot.lock().expect("session lock");
        rec.last_used = Instant::now();
        f(&mut rec)
    }

    fn create(&self, body: &[u8]) -> Result<Response> {
        let req: CreateRequest = serde_json::from_slice(body)?;
        req.sampler_config.validate()?;
        let roll = PianoRoll::from_notes(req.time_steps, req.pitch_count, req.pitch_offset, req.notes)?;
        self.model.check_roll(&roll)?;
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("session map lock");
        let id = loop {
            let candidate = format!("{:016x}", rand::random::<u64>());
            if !map.contains_key(&candidate) {
                break candidate;
            }
        };
        let record = SessionRecord {
            id: id.clone(),
            session: EditSession::new(roll, &req.sampler_config),
            config: req.sampler_config,
            revision: 0,
            created: now,
            last_used: now,
            rng: ChaCha8Rng::seed_from_u64(req.sampler_config.seed),
        };
        map.insert(id.clone(), Arc::new(Mutex::new(record)));
        Ok(Response::json(201, Some(0), &json!({"id": id, "revision": 0})))
    }

    fn delete(&self, id: &str) -> Result<Response> {
        let removed = self.sessions.lock().expect("session map lock").remove(id);
        match removed {
            Some(_) => Ok(Response::json(200, None, &json!({"deleted": id}))),
            None => Err(Error::NotFound(id.to_string())),
        }
    }

    fn step(&self, rec: &mut SessionRecord, body: &[u8]) -> Result<Response> {
        let req: StepRequest = if body.is_empty() {
            serde_json::from_str("{}")?
        } else {
            serde_json::from_slice(body)?
        };
        if req.count == 0 || req.count > MAX_STEPS_PER_REQUEST {
            return Err(Error::Config(format!("count must be in 1..={MAX_STEPS_PER_REQUEST}")));
        }
        let mut cfg = rec.config;
        if let Some(t) = req.temperature {
            cfg.temperature = t;
        }
        if req.max_removals.is_some() {
            cfg.max_removals = req.max_removals;
        }
        cfg.validate()?;
        let mut events = Vec::with_capacity(req.count);
        let mut stopped = None;
        for _ in 0..req.count {
            match rec.session.step(&self.model, &cfg, &mut rec.rng) {
                Ok(s) => {
                    rec.revision += 1;
                    events.push(StepEvent {
                        t: s.event.time,
                        p: s.event.pitch,
                        kind: s.kind,
                        logprob: s.logprob,
                    });
                }
                Err(Error::NoLegalEvent) if !events.is_empty() => {
                    stopped = Some("no_legal_event");
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let mut v = json!({
            "revision": rec.revision,
            "events": events,
            "roll": roll_value(rec.session.current()),
        });
        if let Some(reason) = stopped {
            v["stopped"] = json!(reason);
        }
        Ok(Response::json(200, Some(rec.revision), &v))
    }

    fn export(&self, rec: &SessionRecord) -> Result<Response> {
        let roll = rec.session.current();
        let cfg = QuantizeConfig {
            steps_per_bar: self.steps_per_bar,
            bars_per_sample: roll.time_steps().div_ceil(self.steps_per_bar).max(1),
            pitch_offset: roll.pitch_offset(),
            pitch_count: roll.pitch_count(),
        };
        Ok(Response {
            status: 200,
            content_type: "audio/midi",
            revision: Some(rec.revision),
            body: export_midi(roll, &cfg, self.tempo_bpm)?,
        })
    }
}

fn roll_value(roll: &PianoRoll) -> Value {
    serde_json::to_value(roll).expect("rolls serialize")
}

fn edit(rec: &mut SessionRecord, body: &[u8]) -> Result<Response> {
    let req: EditRequest = serde_json::from_slice(body)?;
    rec.session.user_edit(EditEvent::new(req.t, req.p), req.protect)?;
    rec.revision += 1;
    Ok(Response::json(
        200,
        Some(rec.revision),
        &json!({"revision": rec.revision, "roll": roll_value(rec.session.current())}),
    ))
}

fn undo_redo(rec: &mut SessionRecord, undo: bool) -> Result<Response> {
    let e = if undo { rec.session.undo()? } else { rec.session.redo()? };
    rec.revision += 1;
    Ok(Response::json(
        200,
        Some(rec.revision),
        &json!({
            "revision": rec.revision,
            "event": {"t": e.time, "p": e.pitch},
            "roll": roll_value(rec.session.current()),
        }),
    ))
}

/// Serve `service` over HTTP until ctrl-c.
pub async fn serve(service: Arc<SessionService>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Every request goes through [`SessionService::handle`] on a blocking
/// thread, since model steps are CPU bound.
pub fn router(service: Arc<SessionService>) -> axum::Router {
    use axum::body::Bytes;
    use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
    use axum::response::IntoResponse;

    let handler = move |method: Method, uri: Uri, body: Bytes| {
        let service = service.clone();
        async move {
            let path = uri.path().to_string();
            let resp = tokio::task::spawn_blocking(move || service.handle(method.as_str(), &path, &body))
                .await
                .unwrap_or_else(|e| Response::error(500, "internal", e.to_string()));
            let mut out = (
                StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
                [(header::CONTENT_TYPE, resp.content_type)],
                resp.body,
            )
                .into_response();
            let headers = out.headers_mut();
            headers.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
            if let Some(r) = resp.revision {
                headers.insert("x-revision", HeaderValue::from(r));
            }
            out
        }
    };
    axum::Router::new().fallback(handler)
}
