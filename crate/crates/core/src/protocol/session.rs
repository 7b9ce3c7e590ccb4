use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use super::tools::{run_tool, screen_slide};
use super::{
    EngineContext, Evidence, ExamAnswer, ExamSource, SessionError, Stage,
};
use crate::backends::BackendRequest;
use crate::highlight::RoiSelection;
use crate::parser::{parse_response, ParsedResponse};
use crate::prompt::{reasoner_system_prompt, render_prompt, PromptContext, PromptStage};
use crate::reward::{exam_mentions, normalize};

pub const LOG_FORMAT_VERSION: u32 = 1;
/// Malformed reasoner replies are retried this many times.
const FORMAT_RETRIES: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseInput {
    pub case_id: String,
    pub case_info: String,
    #[serde(default)]
    pub slide_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub index: usize,
    pub stage: Stage,
    pub prompt: String,
    pub raw: String,
    pub parsed: ParsedResponse,
    /// Role that produced the reply.
    pub backend: String,
    /// Logical clock tick; identical across replays.
    pub timestamp: u64,
    /// Ids of the RoI selections that fed this turn.
    pub artifacts: Vec<String>,
    pub retry: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: Stage,
    pub reentry: bool,
}

impl TraceStep {
    pub fn label(&self) -> String {
        if self.reentry {
            format!("{:?}-reentry", self.stage)
        } else {
            format!("{:?}", self.stage)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Boxed { diagnosis: String },
    /// No boxed answer; the last differential stands.
    Inconclusive { differential: Vec<String> },
}

impl Outcome {
    /// Best single diagnosis: the boxed one, else the top of the list.
    pub fn prediction(&self) -> Option<&str> {
        match self {
            Outcome::Boxed { diagnosis } => Some(diagnosis),
            Outcome::Inconclusive { differential } => differential.first().map(String::as_str),
        }
    }

    pub fn is_inconclusive(&self) -> bool {
        matches!(self, Outcome::Inconclusive { .. })
    }
}

/// Append-only session log entry; also the payload of the event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Started {
        seq: u64,
        format_version: u32,
        session_id: String,
        case: CaseInput,
        seed: u64,
        plan: String,
    },
    Stage {
        seq: u64,
        stage: Stage,
        reentry: bool,
    },
    Evidence {
        seq: u64,
        evidence: Evidence,
    },
    Turn {
        seq: u64,
        turn: TurnRecord,
    },
    Flag {
        seq: u64,
        message: String,
    },
    Finished {
        seq: u64,
        outcome: Outcome,
    },
    Aborted {
        seq: u64,
        cause: String,
    },
}

impl SessionEvent {
    pub fn seq(&self) -> u64 {
        match self {
            SessionEvent::Started { seq, .. }
            | SessionEvent::Stage { seq, .. }
            | SessionEvent::Evidence { seq, .. }
            | SessionEvent::Turn { seq, .. }
            | SessionEvent::Flag { seq, .. }
            | SessionEvent::Finished { seq, .. }
            | SessionEvent::Aborted { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSession {
    pub session_id: String,
    pub case: CaseInput,
    pub stage: Stage,
    pub turns: Vec<TurnRecord>,
    pub trace: Vec<TraceStep>,
    /// Current differential, most likely first.
    pub differential: Vec<String>,
    pub pending_exams: Vec<String>,
    pub pending_tools: Vec<String>,
    pub evidence: Vec<Evidence>,
    pub round: usize,
    pub seed: u64,
    pub plan_name: String,
    pub outcome: Option<Outcome>,
    pub abort_cause: Option<String>,
    /// Tool names the reasoner asked for that are not registered.
    pub unknown_tools: Vec<String>,
    #[serde(skip)]
    pub events: Vec<SessionEvent>,
    requested_exams: Vec<String>,
    requested_tools: Vec<String>,
    clock: u64,
    screenings: u64,
}

/// Create a session and run screening plus the exploratory turn.
pub fn start_session(ctx: &EngineContext, case: CaseInput, seed: u64) -> DiagnosticSession {
    let id = format!("{}-s{seed}", case.case_id);
    DiagnosticSession::start_with_id(ctx, id, case, seed)
}

pub fn execute_evidence_round(
    session: &mut DiagnosticSession,
    ctx: &EngineContext,
    exam_input: Option<&[ExamAnswer]>,
) -> Result<(), SessionError> {
    session.execute_evidence_round(ctx, exam_input)
}

pub fn conclude_or_iterate(
    session: &mut DiagnosticSession,
    ctx: &EngineContext,
) -> Result<(), SessionError> {
    session.conclude_or_iterate(ctx)
}

fn render_answers(answers: &[ExamAnswer]) -> String {
    answers
        .iter()
        .map(|a| format!("{}: {}", a.exam, a.result))
        .collect::<Vec<_>>()
        .join("\n")
}

impl DiagnosticSession {
    fn blank(ctx: &EngineContext, session_id: String, case: CaseInput, seed: u64) -> Self {
        let mut s = Self {
            session_id,
            case,
            stage: Stage::Exploration,
            turns: Vec::new(),
            trace: Vec::new(),
            differential: Vec::new(),
            pending_exams: Vec::new(),
            pending_tools: Vec::new(),
            evidence: Vec::new(),
            round: 0,
            seed,
            plan_name: ctx.config.screening.name.clone(),
            outcome: None,
            abort_cause: None,
            unknown_tools: Vec::new(),
            events: Vec::new(),
            requested_exams: Vec::new(),
            requested_tools: Vec::new(),
            clock: 0,
            screenings: 0,
        };
        let started = SessionEvent::Started {
            seq: s.tick(),
            format_version: LOG_FORMAT_VERSION,
            session_id: s.session_id.clone(),
            case: s.case.clone(),
            seed,
            plan: s.plan_name.clone(),
        };
        s.events.push(started);
        s.enter(Stage::Exploration, false);
        s
    }

    /// Case information with screening findings attached, plus artifact ids.
    fn opening(&mut self, ctx: &EngineContext) -> Option<(String, Vec<String>)> {
        let (findings, artifacts) = self.screen(ctx)?;
        let info = match findings {
            Some(text) => format!("{}\n\nMicroscopic findings:\n{}", self.case.case_info, text),
            None => self.case.case_info.clone(),
        };
        Some((info, artifacts))
    }

    pub fn start_with_id(
        ctx: &EngineContext,
        session_id: String,
        case: CaseInput,
        seed: u64,
    ) -> Self {
        let mut s = Self::blank(ctx, session_id, case, seed);
        let Some((case_information, artifacts)) = s.opening(ctx) else {
            return s;
        };
        let tools = if ctx.config.further_look {
            ctx.registry.roster()
        } else {
            Vec::new()
        };
        let prompt = match render_prompt(
            PromptStage::Exploration,
            &PromptContext {
                case_info: Some(case_information),
                tools,
                ..Default::default()
            },
        ) {
            Ok(p) => p,
            Err(e) => {
                s.abort(e.to_string());
                return s;
            }
        };
        if let Some(parsed) = s.reasoner_exchange(ctx, Stage::Exploration, prompt, artifacts) {
            s.absorb(ctx, &parsed, true);
        }
        s
    }

    /// One reasoner turn over the screening evidence that must end in a
    /// boxed diagnosis; anything else is recorded as inconclusive.
    pub fn one_pass(ctx: &EngineContext, session_id: String, case: CaseInput, seed: u64) -> Self {
        let mut s = Self::blank(ctx, session_id, case, seed);
        let Some((case_information, artifacts)) = s.opening(ctx) else {
            return s;
        };
        let prompt = match render_prompt(
            PromptStage::OnePass,
            &PromptContext {
                case_info: Some(case_information),
                ..Default::default()
            },
        ) {
            Ok(p) => p,
            Err(e) => {
                s.abort(e.to_string());
                return s;
            }
        };
        if let Some(parsed) = s.reasoner_exchange(ctx, Stage::Exploitation, prompt, artifacts) {
            if !parsed.diffs().is_empty() {
                s.differential = parsed.diffs().to_vec();
            }
            let outcome = match parsed.boxed {
                Some(diagnosis) => Outcome::Boxed { diagnosis },
                None => Outcome::Inconclusive {
                    differential: s.differential.clone(),
                },
            };
            s.finish(outcome);
        }
        s
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn enter(&mut self, stage: Stage, reentry: bool) {
        self.stage = stage;
        self.trace.push(TraceStep { stage, reentry });
        let seq = self.tick();
        self.events.push(SessionEvent::Stage {
            seq,
            stage,
            reentry,
        });
    }

    fn flag(&mut self, message: String) {
        warn!(session = %self.session_id, %message);
        self.record_flag(message);
    }

    /// Flags that follow from configuration, such as a disabled evidence
    /// source, go to the log without a warning.
    fn note(&mut self, message: String) {
        debug!(session = %self.session_id, %message);
        self.record_flag(message);
    }

    fn record_flag(&mut self, message: String) {
        let seq = self.tick();
        self.events.push(SessionEvent::Flag { seq, message });
    }

    fn add_evidence(&mut self, evidence: Evidence) {
        let seq = self.tick();
        self.events.push(SessionEvent::Evidence {
            seq,
            evidence: evidence.clone(),
        });
        self.evidence.push(evidence);
    }

    fn abort(&mut self, cause: String) {
        warn!(session = %self.session_id, %cause, "session aborted");
        self.abort_cause = Some(cause.clone());
        self.enter(Stage::Aborted, false);
        let seq = self.tick();
        self.events.push(SessionEvent::Aborted { seq, cause });
    }

    fn finish(&mut self, outcome: Outcome) {
        info!(session = %self.session_id, ?outcome, "session done");
        self.pending_exams.clear();
        self.pending_tools.clear();
        self.outcome = Some(outcome.clone());
        self.enter(Stage::Done, false);
        let seq = self.tick();
        self.events.push(SessionEvent::Finished { seq, outcome });
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.stage, Stage::Done | Stage::Aborted)
    }

    /// Exploration with requested exams or tools still to run.
    pub fn awaiting_evidence(&self) -> bool {
        self.stage == Stage::Exploration
            && (!self.pending_exams.is_empty() || !self.pending_tools.is_empty())
    }

    pub fn final_diagnosis(&self) -> Option<&str> {
        match &self.outcome {
            Some(Outcome::Boxed { diagnosis }) => Some(diagnosis),
            _ => None,
        }
    }

    pub fn trace_labels(&self) -> Vec<String> {
        self.trace.iter().map(TraceStep::label).collect()
    }

    /// Screening findings and artifact ids, or `None` when the session was
    /// aborted.
    fn screen(&mut self, ctx: &EngineContext) -> Option<(Option<String>, Vec<String>)> {
        let Some(slide_id) = self.case.slide_id.clone() else {
            return Some((None, Vec::new()));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.screenings));
        self.screenings += 1;
        let selection = match screen_slide(ctx, &slide_id, &mut rng) {
            Ok(sel) => sel,
            Err(e) => {
                self.abort(format!("screening failed: {e}"));
                return None;
            }
        };
        let artifact = format!("screen#r{}/{}", self.round, selection.plan_name);
        if selection.entries.is_empty() {
            let text = "No suspicious region was highlighted on the slide.".to_string();
            self.add_evidence(Evidence::Finding {
                round: self.round,
                text: text.clone(),
                selection,
                no_suspicious_region: true,
            });
            return Some((Some(text), vec![artifact]));
        }
        let prompt = match render_prompt(
            PromptStage::InterpreterGeneral,
            &PromptContext {
                case_info: Some(self.case.case_info.clone()),
                ..Default::default()
            },
        ) {
            Ok(p) => p,
            Err(e) => {
                self.abort(e.to_string());
                return None;
            }
        };
        let request = BackendRequest::interpreter_general(prompt, selection.image_ids());
        match ctx.backends.interpreter.call(&request) {
            Ok(resp) => {
                self.add_evidence(Evidence::Finding {
                    round: self.round,
                    text: resp.text.clone(),
                    selection,
                    no_suspicious_region: false,
                });
                Some((Some(resp.text), vec![artifact]))
            }
            Err(e) => {
                self.abort(format!("interpreter: {e}"));
                None
            }
        }
    }

    /// Well-formed earlier exchanges as (user, assistant) message pairs.
    fn history(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for t in self.turns.iter().filter(|t| t.parsed.is_well_formed()) {
            out.push(("user".to_string(), t.prompt.clone()));
            out.push(("assistant".to_string(), t.raw.clone()));
        }
        out
    }

    /// One reasoner exchange with a single retry on malformed output. `None`
    /// means the session has ended (aborted or inconclusive).
    fn reasoner_exchange(
        &mut self,
        ctx: &EngineContext,
        stage: Stage,
        prompt: String,
        artifacts: Vec<String>,
    ) -> Option<ParsedResponse> {
        for attempt in 0..=FORMAT_RETRIES {
            let request =
                BackendRequest::reasoner(prompt.clone(), reasoner_system_prompt(), &self.history());
            let raw = match ctx.backends.reasoner.call(&request) {
                Ok(r) => r.text,
                Err(e) => {
                    self.abort(format!("reasoner: {e}"));
                    return None;
                }
            };
            let parsed = parse_response(&raw);
            let turn = TurnRecord {
                index: self.turns.len(),
                stage,
                prompt: prompt.clone(),
                raw,
                parsed: parsed.clone(),
                backend: "reasoner".into(),
                timestamp: self.tick(),
                artifacts: artifacts.clone(),
                retry: attempt > 0,
            };
            self.turns.push(turn.clone());
            let seq = self.tick();
            self.events.push(SessionEvent::Turn { seq, turn });
            if parsed.is_well_formed() {
                return Some(parsed);
            }
            self.flag(format!(
                "malformed reasoner reply with {} format errors",
                parsed.format_errors
            ));
        }
        let differential = self.differential.clone();
        self.finish(Outcome::Inconclusive { differential });
        None
    }

    fn unseen(requested: &[String], items: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for item in items {
            let n = normalize(item);
            if !requested.iter().any(|r| normalize(r) == n)
                && !out.iter().any(|o| normalize(o) == n)
            {
                out.push(item.clone());
            }
        }
        out
    }

    /// Take the plan out of a well-formed reply and decide where to go.
    fn absorb(&mut self, ctx: &EngineContext, parsed: &ParsedResponse, exploration: bool) {
        if let Some(b) = &parsed.boxed {
            if !parsed.diffs().is_empty() {
                self.differential = parsed.diffs().to_vec();
            }
            self.finish(Outcome::Boxed {
                diagnosis: b.clone(),
            });
            return;
        }
        self.differential = parsed.diffs().to_vec();
        let mut exams = Self::unseen(&self.requested_exams, parsed.exams());
        let mut tools = Self::unseen(&self.requested_tools, parsed.tools());
        if !ctx.config.further_test && !exams.is_empty() {
            self.note(format!("examinations disabled; dropped {}", exams.join(", ")));
            exams.clear();
        }
        if !ctx.config.further_look && !tools.is_empty() {
            self.note(format!("tool calls disabled; dropped {}", tools.join(", ")));
            tools.clear();
        }
        let more = !exams.is_empty() || !tools.is_empty();
        if !more || (!exploration && self.round >= ctx.config.max_rounds) {
            if more {
                self.flag(format!(
                    "max_rounds {} reached with requests outstanding",
                    ctx.config.max_rounds
                ));
            }
            let differential = self.differential.clone();
            self.finish(Outcome::Inconclusive { differential });
            return;
        }
        self.requested_exams.extend(exams.iter().cloned());
        self.requested_tools.extend(tools.iter().cloned());
        self.pending_exams = exams;
        self.pending_tools = tools;
        if !exploration {
            self.enter(Stage::Exploration, true);
        }
    }

    pub fn execute_evidence_round(
        &mut self,
        ctx: &EngineContext,
        exam_input: Option<&[ExamAnswer]>,
    ) -> Result<(), SessionError> {
        if !self.awaiting_evidence() {
            return Err(SessionError::InvalidStage {
                id: self.session_id.clone(),
                action: "execute an evidence round",
                stage: self.stage,
            });
        }
        self.enter(Stage::Execution, false);
        self.round += 1;
        let round = self.round;
        if ctx.config.reentry_screening && round > 1 && self.screen(ctx).is_none() {
            return Ok(());
        }

        let tools = std::mem::take(&mut self.pending_tools);
        for name in tools {
            let evidence = match ctx.registry.get(&name) {
                Some(spec) => run_tool(ctx, spec, self.case.slide_id.as_deref(), &self.case.case_info, round),
                None => {
                    self.unknown_tools.push(name.clone());
                    self.flag(format!("unregistered tool {name} skipped"));
                    Evidence::ToolSkipped {
                        round,
                        tool: name,
                        reason: "unregistered tool".into(),
                    }
                }
            };
            self.add_evidence(evidence);
        }

        let exams = std::mem::take(&mut self.pending_exams);
        if exams.is_empty() {
            return Ok(());
        }
        let mut remaining = exams.clone();
        if let Some(answers) = exam_input.filter(|a| !a.is_empty()) {
            self.add_evidence(Evidence::Exam {
                round,
                source: ExamSource::Human,
                text: render_answers(answers),
            });
            remaining.retain(|item| !answers.iter().any(|a| exam_mentions(item, &a.exam)));
            if !remaining.is_empty() && !ctx.config.oracle_fallback {
                self.add_evidence(Evidence::Exam {
                    round,
                    source: ExamSource::Unavailable,
                    text: remaining
                        .iter()
                        .map(|e| format!("{e}: result pending"))
                        .collect::<Vec<_>>()
                        .join("\n"),
                });
                return Ok(());
            }
        }
        if remaining.is_empty() {
            return Ok(());
        }
        let evidence = match &ctx.backends.exam_oracle {
            Some(oracle) => {
                let request = BackendRequest::exam_oracle(&remaining, &self.case.case_info, round);
                match oracle.call(&request) {
                    Ok(resp) => Evidence::Exam {
                        round,
                        source: ExamSource::Simulated,
                        text: resp.text,
                    },
                    Err(e) => {
                        self.flag(format!("exam oracle failed: {e}"));
                        Evidence::Exam {
                            round,
                            source: ExamSource::Unavailable,
                            text: format!("{}: unavailable", remaining.join(", ")),
                        }
                    }
                }
            }
            None => Evidence::Exam {
                round,
                source: ExamSource::Unavailable,
                text: format!("{}: unavailable", remaining.join(", ")),
            },
        };
        self.add_evidence(evidence);
        Ok(())
    }

    /// Exam results and observation reports rendered for the definitive prompt.
    pub fn evidence_text(&self) -> (String, String) {
        let mut exams = String::new();
        let mut observations = String::new();
        for e in &self.evidence {
            match e {
                Evidence::Exam { text, .. } => {
                    if !exams.is_empty() {
                        exams.push('\n');
                    }
                    exams.push_str(text);
                }
                Evidence::Observation { report, .. } => {
                    if !observations.is_empty() {
                        observations.push('\n');
                    }
                    observations.push_str(report);
                }
                Evidence::ToolSkipped { tool, reason, .. } => {
                    if !observations.is_empty() {
                        observations.push('\n');
                    }
                    let _ = write!(observations, "{tool}: not available ({reason})");
                }
                Evidence::Finding { .. } => {}
            }
        }
        if exams.is_empty() {
            exams.push_str("None");
        }
        if observations.is_empty() {
            observations.push_str("None");
        }
        (exams, observations)
    }

    fn round_artifacts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.evidence {
            if let Evidence::Observation {
                round,
                tool,
                selections,
                ..
            } = e
            {
                if *round == self.round {
                    let plans: Vec<&str> = selections
                        .iter()
                        .map(|s: &RoiSelection| s.plan_name.as_str())
                        .collect();
                    out.push(format!("{tool}#r{round}/{}", plans.first().copied().unwrap_or("")));
                }
            }
        }
        out
    }

    pub fn conclude_or_iterate(&mut self, ctx: &EngineContext) -> Result<(), SessionError> {
        if self.stage != Stage::Execution {
            return Err(SessionError::InvalidStage {
                id: self.session_id.clone(),
                action: "conclude",
                stage: self.stage,
            });
        }
        let (exam_results, observations) = self.evidence_text();
        let prompt = render_prompt(
            PromptStage::Exploitation,
            &PromptContext {
                exam_results: Some(exam_results),
                observations: Some(observations),
                ..Default::default()
            },
        )?;
        let artifacts = self.round_artifacts();
        if let Some(parsed) = self.reasoner_exchange(ctx, Stage::Exploitation, prompt, artifacts) {
            self.absorb(ctx, &parsed, false);
        }
        Ok(())
    }

    /// One step: run pending evidence and conclude, or conclude an executed
    /// round.
    pub fn advance(
        &mut self,
        ctx: &EngineContext,
        exam_input: Option<&[ExamAnswer]>,
    ) -> Result<(), SessionError> {
        match self.stage {
            Stage::Exploration => {
                self.execute_evidence_round(ctx, exam_input)?;
                if self.stage == Stage::Execution {
                    self.conclude_or_iterate(ctx)?;
                }
                Ok(())
            }
            Stage::Execution => self.conclude_or_iterate(ctx),
            stage => Err(SessionError::InvalidStage {
                id: self.session_id.clone(),
                action: "advance",
                stage,
            }),
        }
    }

    /// Drive the session to Done or Aborted with oracle-supplied exams.
    pub fn run_to_end(&mut self, ctx: &EngineContext) -> Result<(), SessionError> {
        while !self.is_finished() {
            self.advance(ctx, None)?;
        }
        Ok(())
    }

    /// Session log as JSON lines.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.log_text())
    }

    pub fn read_log(path: &Path) -> io::Result<Vec<SessionEvent>> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(io::Error::other))
            .collect()
    }
}
