//! Multi-turn diagnostic sessions.
//!
//! A session starts by screening the slide with the pan-cancer toolkit and
//! asking the reasoner for a ranked differential plus an action plan
//! (exploration). Requested observation tools and examinations are then
//! carried out (execution) and the reasoner either commits to a boxed
//! diagnosis or asks for another round. The stage trace of a session is one
//! of
//!
//! ```text
//! Exploration -> Done
//! Exploration -> Execution -> Done
//! Exploration -> Execution -> Exploration (re-entry) -> Execution -> ... -> Done
//! ```
//!
//! with `Aborted` reachable from any stage when a backend fails.

mod registry;
mod session;
mod tools;

pub use registry::{ReportKind, ToolPlan, ToolRegistry, ToolSpec, DEFAULT_ICL_REFERENCES};
pub use session::{
    conclude_or_iterate, execute_evidence_round, start_session, CaseInput, DiagnosticSession,
    Outcome, SessionEvent, TraceStep, TurnRecord, LOG_FORMAT_VERSION,
};
pub use tools::{parse_yes_no, screen_slide};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, InterpreterMode};
use crate::highlight::{HighlightError, RoiSelection, Toolkit};
use crate::prompt::TemplateError;
use crate::store::{CorpusHandle, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Exploration,
    Execution,
    Exploitation,
    Done,
    Aborted,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session {id} cannot {action} in stage {stage:?}")]
    InvalidStage {
        id: String,
        action: &'static str,
        stage: Stage,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Highlight(#[from] HighlightError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub level: Level,
    pub k_top: usize,
    pub k_random: usize,
}

/// RoIs picked from the pan-cancer highlighted region before the first
/// reasoner turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningPlan {
    pub name: String,
    pub toolkit: String,
    pub steps: Vec<PlanStep>,
}

impl Default for ScreeningPlan {
    fn default() -> Self {
        Self {
            name: "top3@10x+top3@20x+rand2@10x".into(),
            toolkit: "pan-cancer".into(),
            steps: vec![
                PlanStep {
                    level: Level::X10,
                    k_top: 3,
                    k_random: 2,
                },
                PlanStep {
                    level: Level::X20,
                    k_top: 3,
                    k_random: 0,
                },
            ],
        }
    }
}

impl ScreeningPlan {
    pub fn total_rois(&self) -> usize {
        self.steps.iter().map(|s| s.k_top + s.k_random).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub max_rounds: usize,
    pub screening: ScreeningPlan,
    /// Offer and run observation tools.
    pub further_look: bool,
    /// Request and collect examination results.
    pub further_test: bool,
    /// Exams a human leaves unanswered go to the exam oracle.
    pub oracle_fallback: bool,
    /// Re-run pan-cancer screening when the reasoner asks for another round.
    pub reentry_screening: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            screening: ScreeningPlan::default(),
            further_look: true,
            further_test: true,
            oracle_fallback: true,
            reentry_screening: false,
        }
    }
}

/// Everything a session reads but never mutates.
#[derive(Clone)]
pub struct EngineContext {
    pub corpus: Option<Arc<CorpusHandle>>,
    pub toolkits: BTreeMap<String, Arc<Toolkit>>,
    pub registry: ToolRegistry,
    pub backends: Backends,
    pub config: ProtocolConfig,
}

impl EngineContext {
    pub fn new(backends: Backends) -> Self {
        Self {
            corpus: None,
            toolkits: BTreeMap::new(),
            registry: ToolRegistry::default(),
            backends,
            config: ProtocolConfig::default(),
        }
    }

    pub fn with_corpus(mut self, corpus: Arc<CorpusHandle>) -> Self {
        self.corpus = Some(corpus);
        self
    }

    pub fn with_toolkits(mut self, toolkits: impl IntoIterator<Item = Toolkit>) -> Self {
        for t in toolkits {
            self.toolkits.insert(t.name.clone(), Arc::new(t));
        }
        self
    }

    pub fn toolkit(&self, name: &str) -> Result<&Toolkit, SessionError> {
        self.toolkits
            .get(name)
            .map(Arc::as_ref)
            .ok_or_else(|| SessionError::Config(format!("toolkit {name:?} is not loaded")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamSource {
    Human,
    /// Produced by the exam-oracle backend, not a real laboratory.
    Simulated,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamAnswer {
    pub exam: String,
    pub result: String,
}

impl ExamAnswer {
    pub fn new(exam: impl Into<String>, result: impl Into<String>) -> Self {
        Self {
            exam: exam.into(),
            result: result.into(),
        }
    }
}

/// One interpreter exchange made by a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclVerdict {
    pub description: String,
    pub category: String,
    pub mode: InterpreterMode,
    pub images: Vec<String>,
    pub references: Vec<String>,
    pub reply: String,
    pub answer: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    /// General microscopic findings from the screening RoIs.
    Finding {
        round: usize,
        text: String,
        selection: RoiSelection,
        no_suspicious_region: bool,
    },
    Observation {
        round: usize,
        tool: String,
        report: String,
        selections: Vec<RoiSelection>,
        verdicts: Vec<IclVerdict>,
    },
    ToolSkipped {
        round: usize,
        tool: String,
        reason: String,
    },
    Exam {
        round: usize,
        source: ExamSource,
        text: String,
    },
}

impl Evidence {
    pub fn round(&self) -> usize {
        match self {
            Evidence::Finding { round, .. }
            | Evidence::Observation { round, .. }
            | Evidence::ToolSkipped { round, .. }
            | Evidence::Exam { round, .. } => *round,
        }
    }
}
