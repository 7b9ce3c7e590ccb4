//! JSON-over-HTTP session service.
//!
//! Routes (all bodies JSON; a bearer token is required when configured):
//!
//! | method | path                          | effect                                   |
//! |--------|-------------------------------|------------------------------------------|
//! | GET    | `/v1/health`                  | liveness                                 |
//! | GET    | `/v1/sessions`                | id and stage of every session            |
//! | POST   | `/v1/sessions`                | start a session (screening + first turn) |
//! | GET    | `/v1/sessions/{id}`           | full session state                       |
//! | POST   | `/v1/sessions/{id}/exams`     | submit exam results, then advance        |
//! | POST   | `/v1/sessions/{id}/advance`   | one step with oracle-supplied evidence   |
//! | POST   | `/v1/sessions/{id}/lock`      | take the submit lock                     |
//! | DELETE | `/v1/sessions/{id}/lock`      | release it                               |
//! | GET    | `/v1/sessions/{id}/events`    | log events; NDJSON or SSE                |
//!
//! `events` takes `since=<seq>` and `follow=0|1`. With `follow=1` (the
//! default) the response stays open and delivers events as steps complete,
//! closing once the session is Done or Aborted. Sending
//! `Accept: text/event-stream` switches the framing to server-sent events.
//!
//! Steps run on a copy of the session outside the slot lock, so readers
//! are never blocked by backend calls; a second mutation while one is in
//! flight gets 409.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server, StatusCode};
use tracing::{debug, warn};

use crate::reward::exam_mentions;
use crate::protocol::{
    CaseInput, DiagnosticSession, EngineContext, ExamAnswer, SessionEvent, Stage,
};

pub const API_SCHEMA_VERSION: u32 = 1;
const KEEPALIVE: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamMode {
    /// Exams wait for a human submission.
    #[default]
    Interactive,
    /// The session runs to the end on its own with oracle exams.
    Oracle,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateRequest {
    #[serde(default)]
    pub case_id: Option<String>,
    pub case_info: String,
    #[serde(default)]
    pub slide_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<ExamMode>,
}

/// Exam answers as either `{"PAX8": "Positive"}` or
/// `[{"exam": "PAX8", "result": "Positive"}]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Answers {
    Map(BTreeMap<String, String>),
    List(Vec<ExamAnswer>),
}

impl Answers {
    fn into_list(self) -> Vec<ExamAnswer> {
        match self {
            Answers::Map(m) => m.into_iter().map(|(k, v)| ExamAnswer::new(k, v)).collect(),
            Answers::List(l) => l,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubmitRequest {
    pub answers: Answers,
    #[serde(default)]
    pub client: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LockRequest {
    pub client: String,
}

/// What `GET /v1/sessions/{id}` returns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub mode: ExamMode,
    pub awaiting_exams: bool,
    pub busy: bool,
    pub lock_holder: Option<String>,
    pub final_diagnosis: Option<String>,
    pub trace: Vec<String>,
    pub session: DiagnosticSession,
}

struct SlotInner {
    session: DiagnosticSession,
    mode: ExamMode,
    lock_holder: Option<String>,
    busy: bool,
}

struct Slot {
    inner: Mutex<SlotInner>,
    changed: Condvar,
}

impl Slot {
    fn lock(&self) -> MutexGuard<'_, SlotInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Reply of the router, independent of the transport.
pub enum Reply {
    Json(u16, Value),
    Stream(EventStream),
}

impl Reply {
    fn error(status: u16, message: impl Into<String>) -> Self {
        Reply::Json(status, json!({ "error": message.into() }))
    }

    pub fn status(&self) -> u16 {
        match self {
            Reply::Json(s, _) => *s,
            Reply::Stream(_) => 200,
        }
    }
}

pub struct SessionService {
    ctx: Arc<EngineContext>,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
    token: Option<String>,
    default_mode: ExamMode,
}

fn safe_id(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn parse_query(query: &str) -> BTreeMap<&str, &str> {
    query
        .split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| kv.split_once('=').unwrap_or((kv, "")))
        .collect()
}

impl SessionService {
    pub fn new(ctx: EngineContext) -> Self {
        Self {
            ctx: Arc::new(ctx),
            sessions: RwLock::new(BTreeMap::new()),
            token: None,
            default_mode: ExamMode::Interactive,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_default_mode(mut self, mode: ExamMode) -> Self {
        self.default_mode = mode;
        self
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
    }

    fn state(inner: &SlotInner) -> Value {
        let s = &inner.session;
        serde_json::to_value(SessionState {
            schema_version: API_SCHEMA_VERSION,
            mode: inner.mode,
            awaiting_exams: s.awaiting_evidence() && !s.pending_exams.is_empty(),
            busy: inner.busy,
            lock_holder: inner.lock_holder.clone(),
            final_diagnosis: s.final_diagnosis().map(str::to_string),
            trace: s.trace_labels(),
            session: s.clone(),
        })
        .expect("session state serializes")
    }

    /// Route one request.
    pub fn handle(
        self: &Arc<Self>,
        method: &Method,
        url: &str,
        auth: Option<&str>,
        accept: Option<&str>,
        body: &str,
    ) -> Reply {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let query = parse_query(query);
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        if parts.as_slice() == ["v1", "health"] {
            return Reply::Json(200, json!({"status": "ok", "schema_version": API_SCHEMA_VERSION}));
        }
        if let Some(token) = &self.token {
            let given = auth.and_then(|a| a.strip_prefix("Bearer "));
            if given != Some(token.as_str()) {
                return Reply::error(401, "missing or wrong bearer token");
            }
        }
        match (method, parts.as_slice()) {
            (Method::Get, ["v1", "sessions"]) => self.list(),
            (Method::Post, ["v1", "sessions"]) => self.create(body),
            (Method::Get, ["v1", "sessions", id]) => self.get(id),
            (Method::Post, ["v1", "sessions", id, "exams"]) => self.submit(id, body),
            (Method::Post, ["v1", "sessions", id, "advance"]) => self.advance(id),
            (Method::Post, ["v1", "sessions", id, "lock"]) => self.take_lock(id, body),
            (Method::Delete, ["v1", "sessions", id, "lock"]) => self.release_lock(id, body),
            (Method::Get, ["v1", "sessions", id, "events"]) => {
                let since = query.get("since").and_then(|s| s.parse().ok());
                let follow = query.get("follow").is_none_or(|f| *f != "0");
                let sse = accept.is_some_and(|a| a.contains("text/event-stream"));
                self.events(id, since, follow, sse)
            }
            (_, ["v1", "sessions", ..]) => Reply::error(405, format!("{method} not allowed on {path}")),
            _ => Reply::error(404, format!("no route {path}")),
        }
    }

    fn list(&self) -> Reply {
        let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        let items: Vec<Value> = sessions
            .iter()
            .map(|(id, slot)| json!({"session_id": id, "stage": slot.lock().session.stage}))
            .collect();
        Reply::Json(200, json!({"schema_version": API_SCHEMA_VERSION, "sessions": items}))
    }

    fn create(self: &Arc<Self>, body: &str) -> Reply {
        let req: CreateRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, e.to_string()),
        };
        if req.case_info.trim().is_empty() {
            return Reply::error(400, "case_info is empty");
        }
        let case_id = safe_id(req.case_id.as_deref().unwrap_or("case"));
        let base = format!("{case_id}-s{}", req.seed);
        let id = {
            let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
            (1..)
                .map(|n| if n == 1 { base.clone() } else { format!("{base}-{n}") })
                .find(|id| !sessions.contains_key(id))
                .expect("unbounded search")
        };
        let case = CaseInput {
            case_id,
            case_info: req.case_info,
            slide_id: req.slide_id,
        };
        let session = DiagnosticSession::start_with_id(&self.ctx, id.clone(), case, req.seed);
        let mode = req.mode.unwrap_or(self.default_mode);
        let slot = Arc::new(Slot {
            inner: Mutex::new(SlotInner {
                session,
                mode,
                lock_holder: None,
                busy: mode == ExamMode::Oracle,
            }),
            changed: Condvar::new(),
        });
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.clone(), slot.clone());
        let state = Self::state(&slot.lock());
        if mode == ExamMode::Oracle {
            let ctx = self.ctx.clone();
            thread::spawn(move || drive_to_end(&ctx, &slot));
        }
        debug!(session = %id, "session created");
        Reply::Json(201, state)
    }

    fn get(&self, id: &str) -> Reply {
        match self.slot(id) {
            Some(slot) => Reply::Json(200, Self::state(&slot.lock())),
            None => Reply::error(404, format!("unknown session {id}")),
        }
    }

    fn submit(&self, id: &str, body: &str) -> Reply {
        let Some(slot) = self.slot(id) else {
            return Reply::error(404, format!("unknown session {id}"));
        };
        let req: SubmitRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, e.to_string()),
        };
        let answers = req.answers.into_list();
        if answers.is_empty() {
            return Reply::error(400, "no answers submitted");
        }
        let snapshot = {
            let mut inner = slot.lock();
            if inner.busy {
                return Reply::error(409, "session is busy");
            }
            if let Some(holder) = &inner.lock_holder {
                if req.client.as_deref() != Some(holder.as_str()) {
                    return Reply::error(409, format!("submit lock is held by {holder}"));
                }
            }
            let s = &inner.session;
            if !(s.awaiting_evidence() && !s.pending_exams.is_empty()) {
                return Reply::error(409, format!("session is not awaiting exams (stage {:?})", s.stage));
            }
            if let Some(a) = answers.iter().find(|a| !s.pending_exams.iter().any(|p| exam_mentions(p, &a.exam))) {
                return Reply::error(400, format!("{} is not a pending exam", a.exam));
            }
            inner.busy = true;
            inner.session.clone()
        };
        self.step(&slot, snapshot, Some(answers))
    }

    fn advance(&self, id: &str) -> Reply {
        let Some(slot) = self.slot(id) else {
            return Reply::error(404, format!("unknown session {id}"));
        };
        let snapshot = {
            let mut inner = slot.lock();
            if inner.busy {
                return Reply::error(409, "session is busy");
            }
            if !matches!(inner.session.stage, Stage::Exploration | Stage::Execution)
                || inner.session.is_finished()
            {
                return Reply::error(409, format!("nothing to advance in stage {:?}", inner.session.stage));
            }
            inner.busy = true;
            inner.session.clone()
        };
        self.step(&slot, snapshot, None)
    }

    fn step(&self, slot: &Slot, mut session: DiagnosticSession, answers: Option<Vec<ExamAnswer>>) -> Reply {
        let result = session.advance(&self.ctx, answers.as_deref());
        let mut inner = slot.lock();
        inner.busy = false;
        match result {
            Ok(()) => {
                inner.session = session;
                slot.changed.notify_all();
                Reply::Json(200, Self::state(&inner))
            }
            Err(e) => {
                slot.changed.notify_all();
                Reply::error(409, e.to_string())
            }
        }
    }

    fn take_lock(&self, id: &str, body: &str) -> Reply {
        let Some(slot) = self.slot(id) else {
            return Reply::error(404, format!("unknown session {id}"));
        };
        let req: LockRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, e.to_string()),
        };
        let mut inner = slot.lock();
        match &inner.lock_holder {
            Some(h) if *h != req.client => Reply::error(409, format!("submit lock is held by {h}")),
            _ => {
                inner.lock_holder = Some(req.client);
                Reply::Json(200, json!({"lock_holder": inner.lock_holder}))
            }
        }
    }

    fn release_lock(&self, id: &str, body: &str) -> Reply {
        let Some(slot) = self.slot(id) else {
            return Reply::error(404, format!("unknown session {id}"));
        };
        let req: LockRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, e.to_string()),
        };
        let mut inner = slot.lock();
        match &inner.lock_holder {
            Some(h) if *h != req.client => Reply::error(409, format!("submit lock is held by {h}")),
            _ => {
                inner.lock_holder = None;
                Reply::Json(200, json!({"lock_holder": null}))
            }
        }
    }

    fn events(&self, id: &str, since: Option<u64>, follow: bool, sse: bool) -> Reply {
        match self.slot(id) {
            Some(slot) => Reply::Stream(EventStream {
                slot,
                since,
                follow,
                sse,
                buf: Vec::new(),
                pos: 0,
                done: false,
            }),
            None => Reply::error(404, format!("unknown session {id}")),
        }
    }

    /// Serve on `addr` until the returned handle is dropped.
    pub fn serve(self: Arc<Self>, addr: &str) -> io::Result<ServiceHandle> {
        let server = Arc::new(Server::http(addr).map_err(io::Error::other)?);
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("service has no ip address"))?;
        let handle = {
            let server = server.clone();
            thread::spawn(move || {
                for request in server.incoming_requests() {
                    let service = self.clone();
                    thread::spawn(move || service.respond(request));
                }
            })
        };
        Ok(ServiceHandle {
            addr: local,
            server,
            handle: Some(handle),
        })
    }

    fn respond(self: Arc<Self>, mut request: tiny_http::Request) {
        let header = |name: &'static str| {
            request
                .headers()
                .iter()
                .find(|h| h.field.equiv(name))
                .map(|h| h.value.as_str().to_string())
        };
        let auth = header("Authorization");
        let accept = header("Accept");
        let mut body = String::new();
        if request.as_reader().read_to_string(&mut body).is_err() {
            let _ = request.respond(json_response(400, &json!({"error": "unreadable body"})));
            return;
        }
        let method = request.method().clone();
        let url = request.url().to_string();
        let reply = self.handle(&method, &url, auth.as_deref(), accept.as_deref(), &body);
        let sent = match reply {
            Reply::Json(status, value) => request.respond(json_response(status, &value)),
            Reply::Stream(stream) => {
                let kind = if stream.sse {
                    "text/event-stream"
                } else {
                    "application/x-ndjson"
                };
                let headers = vec![
                    Header::from_bytes("Content-Type", kind).expect("static header"),
                    Header::from_bytes("Cache-Control", "no-cache").expect("static header"),
                ];
                request.respond(Response::new(StatusCode(200), headers, stream, None, None))
            }
        };
        if let Err(e) = sent {
            warn!(error = %e, %url, "response not delivered");
        }
    }
}

fn drive_to_end(ctx: &EngineContext, slot: &Slot) {
    loop {
        let mut session = {
            let inner = slot.lock();
            if inner.session.is_finished() {
                break;
            }
            inner.session.clone()
        };
        let result = session.advance(ctx, None);
        let mut inner = slot.lock();
        inner.session = session;
        slot.changed.notify_all();
        if let Err(e) = result {
            warn!(session = %inner.session.session_id, error = %e, "oracle drive stopped");
            break;
        }
    }
    slot.lock().busy = false;
    slot.changed.notify_all();
}

fn json_response(status: u16, value: &Value) -> Response<io::Cursor<Vec<u8>>> {
    Response::from_string(value.to_string())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

/// Session events as a byte stream, blocking for new ones while following.
pub struct EventStream {
    slot: Arc<Slot>,
    since: Option<u64>,
    follow: bool,
    sse: bool,
    buf: Vec<u8>,
    pos: usize,
    done: bool,
}

impl EventStream {
    fn frame(&self, e: &SessionEvent) -> String {
        let data = serde_json::to_string(e).expect("events serialize");
        if self.sse {
            let kind = serde_json::to_value(e)
                .ok()
                .and_then(|v| v["event"].as_str().map(str::to_string))
                .unwrap_or_default();
            format!("id: {}\nevent: {kind}\ndata: {data}\n\n", e.seq())
        } else {
            format!("{data}\n")
        }
    }

    fn refill(&mut self) {
        let mut inner = self.slot.lock();
        loop {
            let fresh: Vec<SessionEvent> = inner
                .session
                .events
                .iter()
                .filter(|e| self.since.is_none_or(|s| e.seq() > s))
                .cloned()
                .collect();
            let settled = inner.session.is_finished() && !inner.busy;
            if !fresh.is_empty() {
                self.since = fresh.last().map(SessionEvent::seq);
                self.buf = fresh.iter().map(|e| self.frame(e)).collect::<String>().into_bytes();
                self.pos = 0;
                return;
            }
            if !self.follow || settled {
                self.done = true;
                return;
            }
            let (guard, timeout) = self
                .slot
                .changed
                .wait_timeout(inner, KEEPALIVE)
                .unwrap_or_else(|p| p.into_inner());
            inner = guard;
            if timeout.timed_out() && self.sse {
                self.buf = b": keepalive\n\n".to_vec();
                self.pos = 0;
                return;
            }
        }
    }
}

impl Read for EventStream {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos >= self.buf.len() {
            if self.done {
                return Ok(0);
            }
            self.refill();
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub struct ServiceHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the listener stops.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
