use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tiny_http::{Header, Method, Response, Server};
use tracing::debug;

use super::{Backend, BackendError, BackendRequest, BackendResponse, Role};
use crate::reward::exam_mentions;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub role: Role,
    pub response: String,
    /// Non-200 statuses are served with `response` as the error body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl ScriptTurn {
    pub fn new(role: Role, response: impl Into<String>) -> Self {
        Self {
            role,
            response: response.into(),
            status: None,
            delay_ms: None,
        }
    }
}

/// Ordered replies per role, plus an optional exam-result table the exam
/// oracle falls back to once its scripted turns are used up.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub turns: Vec<ScriptTurn>,
    #[serde(default)]
    pub exam_table: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Turns(Vec<ScriptTurn>),
    Full(Script),
}

impl Script {
    pub fn from_turns(turns: Vec<ScriptTurn>) -> Self {
        Self {
            turns,
            exam_table: BTreeMap::new(),
        }
    }

    /// Accepts either a bare array of turns or `{turns, exam_table}`.
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        match serde_json::from_str::<ScriptFile>(text) {
            Ok(ScriptFile::Turns(turns)) => Ok(Self::from_turns(turns)),
            Ok(ScriptFile::Full(s)) => Ok(s),
            Err(e) => Err(BackendError::Protocol(format!("bad script: {e}"))),
        }
    }

    pub fn count(&self, role: Role) -> usize {
        self.turns.iter().filter(|t| t.role == role).count()
    }
}

/// Answer exam names from the table; a table key matches an exam item when
/// it equals the item or appears in it as a whole token.
pub(crate) fn table_answer(table: &BTreeMap<String, String>, exams: &[String]) -> String {
    let mut lines = Vec::new();
    for exam in exams {
        let mut hit = false;
        for (key, value) in table {
            if exam_mentions(exam, key) {
                lines.push(format!("{key}: {value}"));
                hit = true;
            }
        }
        if !hit {
            lines.push(format!("{exam}: not available"));
        }
    }
    lines.join("\n")
}

struct Served {
    status: u16,
    text: String,
    delay: Option<Duration>,
}

#[derive(Default)]
struct ScriptState {
    queues: BTreeMap<Role, VecDeque<ScriptTurn>>,
    exam_table: BTreeMap<String, String>,
    log: Vec<BackendRequest>,
}

/// In-process scripted backend. Serves every role from one script, strictly
/// in order per role, and records each request it answers.
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut queues: BTreeMap<Role, VecDeque<ScriptTurn>> = BTreeMap::new();
        for turn in script.turns {
            queues.entry(turn.role).or_default().push_back(turn);
        }
        Self {
            state: Mutex::new(ScriptState {
                queues,
                exam_table: script.exam_table,
                log: Vec::new(),
            }),
        }
    }

    /// Requests answered so far, in arrival order.
    pub fn requests(&self) -> Vec<BackendRequest> {
        self.state.lock().expect("script lock").log.clone()
    }

    pub fn remaining(&self, role: Role) -> usize {
        self.state
            .lock()
            .expect("script lock")
            .queues
            .get(&role)
            .map_or(0, VecDeque::len)
    }

    fn serve(&self, request: &BackendRequest) -> Served {
        let mut state = self.state.lock().expect("script lock");
        let next = state.queues.get_mut(&request.role).and_then(VecDeque::pop_front);
        let served = match next {
            Some(turn) => Served {
                status: turn.status.unwrap_or(200),
                text: turn.response,
                delay: turn.delay_ms.map(Duration::from_millis),
            },
            None if request.role == Role::ExamOracle && !state.exam_table.is_empty() => Served {
                status: 200,
                text: table_answer(&state.exam_table, &request.exams()),
                delay: None,
            },
            None => {
                return Served {
                    status: 409,
                    text: format!(
                        "script exhausted for role {} after {} requests",
                        request.role,
                        state.log.iter().filter(|r| r.role == request.role).count()
                    ),
                    delay: None,
                }
            }
        };
        state.log.push(request.clone());
        served
    }
}

impl Backend for ScriptedBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        request.validate()?;
        let served = self.serve(request);
        if let Some(d) = served.delay {
            thread::sleep(d);
        }
        if served.status != 200 {
            return Err(BackendError::Rejected {
                role: request.role,
                status: served.status,
                body: served.text,
            });
        }
        Ok(BackendResponse {
            text: served.text,
            usage: json!({"scripted": true}),
        })
    }
}

/// The scripted backend behind a real HTTP listener on 127.0.0.1.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<Server>,
    backend: Arc<ScriptedBackend>,
    handle: Option<JoinHandle<()>>,
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body)
        .with_status_code(status)
        .with_header(
            Header::from_bytes("Content-Type", "application/json").expect("static header"),
        )
}

impl MockServer {
    pub fn start(script: Script) -> std::io::Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server has no ip address"))?;
        let server = Arc::new(server);
        let backend = Arc::new(ScriptedBackend::new(script));
        let handle = {
            let server = server.clone();
            let backend = backend.clone();
            thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let reply = Self::handle(&backend, &mut request);
                    let _ = request.respond(reply);
                }
            })
        };
        Ok(Self {
            addr,
            server,
            backend,
            handle: Some(handle),
        })
    }

    fn handle(
        backend: &ScriptedBackend,
        request: &mut tiny_http::Request,
    ) -> Response<std::io::Cursor<Vec<u8>>> {
        let path = request.url().to_string();
        let Some(role) = path.strip_prefix("/v1/").and_then(|r| r.parse::<Role>().ok()) else {
            return json_response(404, json!({"error": format!("no route {path}")}).to_string());
        };
        if *request.method() != Method::Post {
            return json_response(405, json!({"error": "POST only"}).to_string());
        }
        let mut body = String::new();
        if request.as_reader().read_to_string(&mut body).is_err() {
            return json_response(400, json!({"error": "unreadable body"}).to_string());
        }
        let parsed: BackendRequest = match serde_json::from_str(&body) {
            Ok(r) => r,
            Err(e) => return json_response(400, json!({"error": e.to_string()}).to_string()),
        };
        if parsed.role != role {
            return json_response(
                400,
                json!({"error": format!("body role {} does not match path", parsed.role)})
                    .to_string(),
            );
        }
        if let Err(e) = parsed.validate() {
            return json_response(400, json!({"error": e.to_string()}).to_string());
        }
        let served = backend.serve(&parsed);
        if let Some(d) = served.delay {
            thread::sleep(d);
        }
        debug!(%role, status = served.status, "mock served");
        if served.status == 200 {
            json_response(
                200,
                json!({"text": served.text, "usage": {"scripted": true}}).to_string(),
            )
        } else if served.status == 409 {
            json_response(409, json!({"error": served.text}).to_string())
        } else {
            json_response(served.status, served.text)
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<BackendRequest> {
        self.backend.requests()
    }

    pub fn remaining(&self, role: Role) -> usize {
        self.backend.remaining(role)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
