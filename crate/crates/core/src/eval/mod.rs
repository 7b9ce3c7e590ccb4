//! Batch protocols, metrics and ablations.
//!
//! A run takes a set of [`CaseFixture`]s, drives each one through either the
//! one-pass protocol (a single reasoner turn over the screening findings) or
//! the full evidence-seeking loop, and summarizes the outcomes into a
//! [`MetricsReport`]. Diagnosis strings are mapped to classes with the same
//! rule-based judge the reward uses.

mod ablation;
mod metrics;

pub use ablation::{parse_grid, parse_plan, run_ablation, AblationAxis, AblationReport, AblationRow, GridCell};
pub use metrics::{
    accuracy, balanced_accuracy, default_pemr_patterns, gleason_accuracy, grade_band,
    invasion_prf, mentions_invasion, parse_gleason, parse_nuclear_grade, pemr, ClassScores, Prf,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::{Backends, Script, ScriptedBackend};
use crate::protocol::{
    start_session, CaseInput, DiagnosticSession, EngineContext, Evidence, Outcome, Stage,
};
use crate::reward::RuleBasedJudge;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One reasoner turn that must commit to a diagnosis.
    Op,
    /// The full evidence-seeking loop.
    Es,
}

impl FromStr for Protocol {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "op" => Ok(Protocol::Op),
            "es" => Ok(Protocol::Es),
            other => Err(EvalError::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum GradeTruth {
    /// Fuhrman/ISUP grade 1-4.
    Nuclear { grade: u8 },
    Gleason { primary: u8, secondary: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFixture {
    pub case_id: String,
    pub case_info: String,
    #[serde(default)]
    pub slide_id: Option<String>,
    pub truth: String,
    #[serde(default)]
    pub grade: Option<GradeTruth>,
    #[serde(default)]
    pub invasion: Option<bool>,
    /// Backend script replayed for this case; relative paths resolve
    /// against the fixture file's directory.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
}

fn default_protocol() -> Protocol {
    Protocol::Es
}

impl CaseFixture {
    pub fn validate(&self) -> Result<(), EvalError> {
        match &self.grade {
            Some(GradeTruth::Nuclear { grade }) if !(1..=4).contains(grade) => Err(
                EvalError::Contract(format!("{}: nuclear grade {grade} outside 1-4", self.case_id)),
            ),
            Some(GradeTruth::Gleason { primary, secondary })
                if !(3..=5).contains(primary) || !(3..=5).contains(secondary) =>
            {
                Err(EvalError::Contract(format!(
                    "{}: Gleason {primary}+{secondary} outside 3-5",
                    self.case_id
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn input(&self) -> CaseInput {
        CaseInput {
            case_id: self.case_id.clone(),
            case_info: self.case_info.clone(),
            slide_id: self.slide_id.clone(),
        }
    }
}

/// Every `*.json` file of `dir/cases` (or `dir` itself), in name order.
pub fn load_fixtures(dir: &Path) -> Result<Vec<CaseFixture>, EvalError> {
    let cases = dir.join("cases");
    let root = if cases.is_dir() { cases } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| EvalError::Io(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| EvalError::Io(format!("{}: {e}", p.display())))?;
        let mut f: CaseFixture = serde_json::from_str(&text)
            .map_err(|e| EvalError::Config(format!("{}: {e}", p.display())))?;
        if let Some(s) = &f.script {
            if s.is_relative() {
                f.script = Some(root.join(s));
            }
        }
        f.validate()?;
        out.push(f);
    }
    if out.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(out)
}

/// Shared inputs of a batch run.
#[derive(Clone)]
pub struct EvalEnv {
    pub base: EngineContext,
    pub judge: Arc<RuleBasedJudge>,
    pub pemr_patterns: BTreeMap<String, Vec<String>>,
    pub seed: u64,
    pub parallelism: usize,
    /// Session logs are written here when set.
    pub out_dir: Option<PathBuf>,
}

impl EvalEnv {
    pub fn new(base: EngineContext) -> Self {
        Self {
            base,
            judge: Arc::new(RuleBasedJudge::default()),
            pemr_patterns: default_pemr_patterns(),
            seed: 0,
            parallelism: 1,
            out_dir: None,
        }
    }

    /// The base context, with backends replaced by the fixture's script
    /// when it has one.
    pub fn context_for(&self, fixture: &CaseFixture) -> Result<EngineContext, EvalError> {
        let mut ctx = self.base.clone();
        if let Some(path) = &fixture.script {
            let text = fs::read_to_string(path)
                .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
            let script = Script::from_json(&text).map_err(|e| EvalError::Config(e.to_string()))?;
            ctx.backends = Backends::shared(Arc::new(ScriptedBackend::new(script)));
        }
        Ok(ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Done,
    Aborted,
    Failed,
}

/// What the harness keeps from one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRun {
    pub case_id: String,
    pub protocol: Protocol,
    pub status: RunStatus,
    pub outcome: Option<Outcome>,
    pub prediction: Option<String>,
    /// Differential of the first well-formed reasoner turn.
    pub initial_differential: Vec<String>,
    pub trace: Vec<String>,
    pub reasoner_turns: usize,
    /// Think and answer text of turns before any evidence round.
    pub pre_evidence_text: String,
    /// Think and answer text of the last turn.
    pub final_text: String,
    pub observations: Vec<String>,
    pub error: Option<String>,
    pub log_path: Option<PathBuf>,
    #[serde(skip)]
    pub log: String,
}

fn turn_text(t: &crate::protocol::TurnRecord) -> String {
    format!(
        "{}\n{}",
        t.parsed.think.as_deref().unwrap_or(""),
        t.parsed.answer.as_deref().unwrap_or("")
    )
}

fn summarize_session(f: &CaseFixture, protocol: Protocol, s: &DiagnosticSession) -> CaseRun {
    let first = s.turns.iter().find(|t| t.parsed.is_well_formed());
    let initial_differential = first.map(|t| t.parsed.diagnoses()).unwrap_or_default();
    let pre_evidence_text = s
        .turns
        .iter()
        .filter(|t| t.stage == Stage::Exploration)
        .map(turn_text)
        .collect::<Vec<_>>()
        .join("\n");
    let observations = s
        .evidence
        .iter()
        .filter_map(|e| match e {
            Evidence::Observation { report, .. } => Some(report.clone()),
            _ => None,
        })
        .collect();
    CaseRun {
        case_id: f.case_id.clone(),
        protocol,
        status: if s.stage == Stage::Aborted {
            RunStatus::Aborted
        } else {
            RunStatus::Done
        },
        prediction: s.outcome.as_ref().and_then(Outcome::prediction).map(str::to_string),
        outcome: s.outcome.clone(),
        initial_differential,
        trace: s.trace_labels(),
        reasoner_turns: s.turns.len(),
        pre_evidence_text,
        final_text: s.turns.last().map(turn_text).unwrap_or_default(),
        observations,
        error: s.abort_cause.clone(),
        log_path: None,
        log: s.log_text(),
    }
}

fn failed(f: &CaseFixture, protocol: Protocol, error: String) -> CaseRun {
    CaseRun {
        case_id: f.case_id.clone(),
        protocol,
        status: RunStatus::Failed,
        outcome: None,
        prediction: None,
        initial_differential: Vec::new(),
        trace: Vec::new(),
        reasoner_turns: 0,
        pre_evidence_text: String::new(),
        final_text: String::new(),
        observations: Vec::new(),
        error: Some(error),
        log_path: None,
        log: String::new(),
    }
}

fn run_one(env: &EvalEnv, f: &CaseFixture, protocol: Protocol) -> CaseRun {
    let ctx = match env.context_for(f) {
        Ok(c) => c,
        Err(e) => return failed(f, protocol, e.to_string()),
    };
    let session = match protocol {
        Protocol::Op => DiagnosticSession::one_pass(
            &ctx,
            format!("{}-op-s{}", f.case_id, env.seed),
            f.input(),
            env.seed,
        ),
        Protocol::Es => {
            let mut s = start_session(&ctx, f.input(), env.seed);
            if let Err(e) = s.run_to_end(&ctx) {
                return failed(f, protocol, e.to_string());
            }
            s
        }
    };
    let mut run = summarize_session(f, protocol, &session);
    if let Some(dir) = &env.out_dir {
        let tag = match protocol {
            Protocol::Op => "op",
            Protocol::Es => "es",
        };
        let path = dir.join(format!("{}.{tag}.jsonl", f.case_id));
        match session.write_log(&path) {
            Ok(()) => run.log_path = Some(path),
            Err(e) => warn!(case = %f.case_id, error = %e, "could not write session log"),
        }
    }
    run
}

/// Run every fixture under `protocol`. Per-case failures are recorded and
/// the harness carries on; output order follows `fixtures`.
pub fn run_protocol(env: &EvalEnv, fixtures: &[CaseFixture], protocol: Protocol) -> Vec<CaseRun> {
    let work = || {
        fixtures
            .par_iter()
            .map(|f| run_one(env, f, protocol))
            .collect::<Vec<_>>()
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(env.parallelism.max(1))
        .build()
    {
        Ok(pool) => pool.install(work),
        Err(_) => fixtures.iter().map(|f| run_one(env, f, protocol)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: usize,
    /// Sessions that reached Done and enter the metrics.
    pub counted: usize,
    pub failed: Vec<String>,
    pub inconclusive: usize,
    pub classes: Vec<String>,
    pub per_class_recall: BTreeMap<String, Option<f64>>,
    pub empty_classes: Vec<String>,
    pub balanced_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub initial_bacc: Option<f64>,
    pub ddx_bacc: Option<f64>,
    pub ddx_length: Option<f64>,
    /// Low (1-2) versus high (3-4) nuclear grade agreement.
    pub grading_accuracy: Option<f64>,
    pub gleason_primary: Option<f64>,
    pub gleason_combined: Option<f64>,
    pub invasion: Option<Prf>,
    pub pemr: BTreeMap<String, f64>,
}

fn class_of(judge: &RuleBasedJudge, classes: &[String], text: Option<&str>) -> Option<usize> {
    let text = text?;
    classes.iter().position(|c| judge.same_diagnosis(text, c))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Summarize runs against their fixtures (matched by case id).
pub fn evaluate(env: &EvalEnv, fixtures: &[CaseFixture], runs: &[CaseRun]) -> MetricsReport {
    let judge = env.judge.as_ref();
    let by_id: BTreeMap<&str, &CaseFixture> =
        fixtures.iter().map(|f| (f.case_id.as_str(), f)).collect();
    let mut classes: Vec<String> = Vec::new();
    for f in fixtures {
        if !classes.iter().any(|c| judge.same_diagnosis(&f.truth, c)) {
            classes.push(f.truth.clone());
        }
    }
    let counted: Vec<(&CaseRun, &CaseFixture)> = runs
        .iter()
        .filter(|r| r.status == RunStatus::Done)
        .filter_map(|r| by_id.get(r.case_id.as_str()).map(|f| (r, *f)))
        .collect();
    let failed = runs
        .iter()
        .filter(|r| r.status != RunStatus::Done)
        .map(|r| r.case_id.clone())
        .collect();
    let truths: Vec<Option<usize>> = counted
        .iter()
        .map(|(_, f)| class_of(judge, &classes, Some(&f.truth)))
        .collect();
    let class_keys: Vec<Option<usize>> = (0..classes.len()).map(Some).collect();
    let score = |preds: Vec<Option<usize>>| balanced_accuracy(&preds, &truths, &class_keys).ok();

    let finals = score(
        counted
            .iter()
            .map(|(r, _)| class_of(judge, &classes, r.prediction.as_deref()))
            .collect(),
    );
    let initial = score(
        counted
            .iter()
            .map(|(r, _)| class_of(judge, &classes, r.initial_differential.first().map(String::as_str)))
            .collect(),
    );
    let ddx = score(
        counted
            .iter()
            .zip(&truths)
            .map(|((r, f), t)| {
                judge
                    .match_position(&r.initial_differential, &f.truth)
                    .and(*t)
            })
            .collect(),
    );
    let ddx_length = mean(
        counted
            .iter()
            .filter(|(r, _)| !r.initial_differential.is_empty())
            .map(|(r, _)| r.initial_differential.len() as f64),
    );

    let grading_accuracy = mean(counted.iter().filter_map(|(r, f)| match f.grade {
        Some(GradeTruth::Nuclear { grade }) => {
            let pred = r.prediction.as_deref().and_then(parse_nuclear_grade);
            Some(f64::from(u8::from(
                pred.and_then(grade_band).is_some() && pred.and_then(grade_band) == grade_band(grade),
            )))
        }
        _ => None,
    }));
    let gleason: Vec<(bool, bool)> = counted
        .iter()
        .filter_map(|(r, f)| match f.grade {
            Some(GradeTruth::Gleason { primary, secondary }) => {
                let pred = r
                    .prediction
                    .as_deref()
                    .and_then(parse_gleason)
                    .or_else(|| r.observations.iter().find_map(|o| parse_gleason(o)));
                Some(
                    pred.and_then(|p| gleason_accuracy(p, (primary, secondary)).ok())
                        .unwrap_or((false, false)),
                )
            }
            _ => None,
        })
        .collect();
    let (inv_pred, inv_truth): (Vec<bool>, Vec<bool>) = counted
        .iter()
        .filter_map(|(r, f)| f.invasion.map(|t| (mentions_invasion(&r.final_text), t)))
        .unzip();
    let pre_texts: Vec<String> = counted.iter().map(|(r, _)| r.pre_evidence_text.clone()).collect();
    let pemr_rates = env
        .pemr_patterns
        .iter()
        .filter_map(|(task, pats)| pemr(&pre_texts, pats).ok().map(|v| (task.clone(), v)))
        .collect();

    MetricsReport {
        cases: runs.len(),
        counted: counted.len(),
        failed,
        inconclusive: counted
            .iter()
            .filter(|(r, _)| r.outcome.as_ref().is_some_and(Outcome::is_inconclusive))
            .count(),
        per_class_recall: classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), finals.as_ref().and_then(|s| s.recalls[i])))
            .collect(),
        empty_classes: finals
            .as_ref()
            .map(|s| s.empty_classes.iter().map(|&i| classes[i].clone()).collect())
            .unwrap_or_default(),
        balanced_accuracy: finals.as_ref().map(|s| s.balanced_accuracy),
        accuracy: finals.as_ref().map(|s| s.accuracy),
        initial_bacc: initial.map(|s| s.balanced_accuracy),
        ddx_bacc: ddx.map(|s| s.balanced_accuracy),
        ddx_length,
        grading_accuracy,
        gleason_primary: mean(gleason.iter().map(|g| f64::from(u8::from(g.0)))),
        gleason_combined: mean(gleason.iter().map(|g| f64::from(u8::from(g.1)))),
        invasion: invasion_prf(&inv_pred, &inv_truth).ok(),
        pemr: pemr_rates,
        classes,
    }
}

/// `engine eval` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub metrics: MetricsReport,
    pub runs: Vec<CaseRun>,
}

pub fn run_eval(env: &EvalEnv, fixtures: &[CaseFixture], protocol: Protocol) -> EvalReport {
    let runs = run_protocol(env, fixtures, protocol);
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol,
        metrics: evaluate(env, fixtures, &runs),
        runs,
    }
}

pub(crate) fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl MetricsReport {
    /// Aligned text summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "cases {}  counted {}  inconclusive {}  failed {}",
            self.cases,
            self.counted,
            self.inconclusive,
            self.failed.len()
        );
        if !self.failed.is_empty() {
            let _ = writeln!(out, "failed: {}", self.failed.join(", "));
        }
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "", "Initial", "DDx", "DDx Len", "Final", "Acc"
        );
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "BAcc (%)",
            pct(self.initial_bacc),
            pct(self.ddx_bacc),
            self.ddx_length.map_or("-".into(), |l| format!("{l:.2}")),
            pct(self.balanced_accuracy),
            pct(self.accuracy)
        );
        for (class, recall) in &self.per_class_recall {
            let _ = writeln!(out, "  recall {:<44} {:>8}", class, pct(*recall));
        }
        if self.grading_accuracy.is_some() {
            let _ = writeln!(out, "grading (low/high) accuracy {:>8}", pct(self.grading_accuracy));
        }
        if self.gleason_primary.is_some() {
            let _ = writeln!(
                out,
                "Gleason primary {:>8}  combined {:>8}",
                pct(self.gleason_primary),
                pct(self.gleason_combined)
            );
        }
        if let Some(p) = &self.invasion {
            let _ = writeln!(
                out,
                "invasion P {:>8}  R {:>8}  F1 {:>8}",
                pct(Some(p.precision)),
                pct(Some(p.recall)),
                pct(Some(p.f1))
            );
        }
        for (task, rate) in &self.pemr {
            let _ = writeln!(out, "PEMR {:<10} {:>8}", task, pct(Some(*rate)));
        }
        out
    }
}
