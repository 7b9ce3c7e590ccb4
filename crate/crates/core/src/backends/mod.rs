//! Clients for the external model roles and a scripted stand-in for tests.
//!
//! Every role speaks the same JSON wire format over `POST /v1/{role}`:
//!
//! ```text
//! request:  {"role", "mode", "prompt", "images": [id], "references": [id], "metadata"}
//! response: {"text", "usage"}
//! ```
//!
//! Images travel as ids (`slide@level:x,y`); resolving them to pixels is the
//! serving side's business.

mod http;
mod mock;
mod remote_judge;

pub use http::{BackendEndpoint, HttpBackend};
pub use mock::{MockServer, Script, ScriptTurn, ScriptedBackend};
pub use remote_judge::RemoteJudge;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Interpreter,
    Reasoner,
    Judge,
    ExamOracle,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Interpreter, Role::Reasoner, Role::Judge, Role::ExamOracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Interpreter => "interpreter",
            Role::Reasoner => "reasoner",
            Role::Judge => "judge",
            Role::ExamOracle => "exam_oracle",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| BackendError::Protocol(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpreterMode {
    General,
    Icl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<InterpreterMode>,
    pub prompt: String,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub metadata: Value,
}

impl BackendRequest {
    pub fn interpreter_general(prompt: String, images: Vec<String>) -> Self {
        Self {
            role: Role::Interpreter,
            mode: Some(InterpreterMode::General),
            prompt,
            images,
            references: Vec::new(),
            metadata: Value::Null,
        }
    }

    /// ICL requests must carry at least one reference image.
    pub fn interpreter_icl(
        prompt: String,
        images: Vec<String>,
        references: Vec<String>,
        metadata: Value,
    ) -> Result<Self, BackendError> {
        if references.is_empty() {
            return Err(BackendError::Protocol(
                "icl request without reference images".into(),
            ));
        }
        Ok(Self {
            role: Role::Interpreter,
            mode: Some(InterpreterMode::Icl),
            prompt,
            images,
            references,
            metadata,
        })
    }

    /// `history` alternates user and assistant messages of earlier turns.
    pub fn reasoner(prompt: String, system: &str, history: &[(String, String)]) -> Self {
        let history: Vec<Value> = history
            .iter()
            .map(|(role, content)| json!({"role": role, "content": content}))
            .collect();
        Self {
            role: Role::Reasoner,
            mode: None,
            prompt,
            images: Vec::new(),
            references: Vec::new(),
            metadata: json!({"system": system, "history": history}),
        }
    }

    pub fn exam_oracle(exams: &[String], case_context: &str, round: usize) -> Self {
        let prompt = format!(
            "Case information:\n{case_context}\n\nProvide results for the following examinations, one per line as `name: result`:\n{}",
            exams.join("\n")
        );
        Self {
            role: Role::ExamOracle,
            mode: None,
            prompt,
            images: Vec::new(),
            references: Vec::new(),
            metadata: json!({"exams": exams, "case_info": case_context, "round": round}),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match (self.role, self.mode) {
            (Role::Interpreter, Some(InterpreterMode::Icl)) if self.references.is_empty() => Err(
                BackendError::Protocol("icl request without reference images".into()),
            ),
            (Role::Interpreter, Some(InterpreterMode::General)) if !self.references.is_empty() => {
                Err(BackendError::Protocol(
                    "general request must not carry reference images".into(),
                ))
            }
            (Role::Interpreter, None) => Err(BackendError::Protocol(
                "interpreter request without a mode".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Exam names listed in an exam-oracle request.
    pub fn exams(&self) -> Vec<String> {
        self.metadata
            .get("exams")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Value,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("{role} backend unavailable after {attempts} attempts: {cause}")]
    Unavailable {
        role: Role,
        attempts: u32,
        cause: String,
    },
    #[error("{role} backend rejected the request with status {status}: {body}")]
    Rejected { role: Role, status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no backend configured for role {0}")]
    Missing(Role),
}

/// One logical request/response exchange with a model role.
pub trait Backend: Send + Sync {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

/// The backends a diagnostic session talks to.
#[derive(Clone)]
pub struct Backends {
    pub interpreter: Arc<dyn Backend>,
    pub reasoner: Arc<dyn Backend>,
    pub exam_oracle: Option<Arc<dyn Backend>>,
}

impl Backends {
    /// All roles served by one backend (scripted or a single gateway).
    pub fn shared(backend: Arc<dyn Backend>) -> Self {
        Self {
            interpreter: backend.clone(),
            reasoner: backend.clone(),
            exam_oracle: Some(backend),
        }
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("exam_oracle", &self.exam_oracle.is_some())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_names_round_trip() {
        for r in Role::ALL {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
            assert_eq!(serde_json::to_value(r).unwrap(), Value::String(r.as_str().into()));
        }
        assert!("radiologist".parse::<Role>().is_err());
    }

    #[test]
    fn icl_needs_references() {
        assert!(BackendRequest::interpreter_icl("p".into(), vec!["a".into()], vec![], Value::Null).is_err());
        let mut general = BackendRequest::interpreter_general("p".into(), vec!["a".into()]);
        assert!(general.validate().is_ok());
        general.references.push("r".into());
        assert!(general.validate().is_err());
    }

    #[test]
    fn exam_request_lists_exams() {
        let req = BackendRequest::exam_oracle(&["PAX8".into(), "CD10".into()], "kidney", 1);
        assert_eq!(req.exams(), ["PAX8", "CD10"]);
        assert!(req.prompt.ends_with("PAX8\nCD10"));
    }
}
