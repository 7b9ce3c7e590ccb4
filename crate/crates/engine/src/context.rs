//! Turning an [`EngineConfig`] into an [`EngineContext`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use evidence_core::backends::{
    Backend, BackendError, BackendRequest, BackendResponse, Backends, HttpBackend, Role,
};
use evidence_core::eval::parse_plan;
use evidence_core::highlight::{load_toolkit, Toolkit};
use evidence_core::protocol::{EngineContext, ProtocolConfig};
use evidence_core::reward::{JudgeTables, RuleBasedJudge, ToolRuleSet};
use evidence_core::store::{ingest_corpus, CorpusHandle};
use evidence_core::synth::{WorldFile, WORLD_FILE};
use tracing::info;

use crate::config::{BackendKind, EngineConfig};

/// Stands in for every role when no model server is configured.
struct Offline;

impl Backend for Offline {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        Err(BackendError::Unavailable {
            role: request.role,
            attempts: 0,
            cause: "no model backend configured (set backends.base_url or provide a world.json)".into(),
        })
    }
}

/// Fill unset data paths from a directory laid out as `corpus/`,
/// `toolkits/` and `world.json`. Each hint is tried in order.
pub fn detect_paths(cfg: &mut EngineConfig, hints: &[&Path]) {
    for dir in hints {
        if cfg.corpus.is_none() && dir.join("corpus/manifest.json").is_file() {
            cfg.corpus = Some(dir.join("corpus"));
        }
        if cfg.toolkits.is_none() && dir.join("toolkits").is_dir() {
            cfg.toolkits = Some(dir.join("toolkits"));
        }
        if cfg.backends.world.is_none() && dir.join(WORLD_FILE).is_file() {
            cfg.backends.world = Some(dir.join(WORLD_FILE));
        }
    }
}

/// `dir` and its parent, for files that live one level below the data root.
pub fn with_parent(dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![dir.to_path_buf()];
    if let Some(p) = dir.parent() {
        out.push(p.to_path_buf());
    }
    out
}

pub fn load_toolkits(dir: &Path) -> Result<Vec<Toolkit>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading toolkit dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| load_toolkit(dir, n).with_context(|| format!("loading toolkit {n}")))
        .collect()
}

pub fn load_corpus(cfg: &EngineConfig) -> Result<Option<Arc<CorpusHandle>>> {
    cfg.corpus
        .as_ref()
        .map(|p| {
            ingest_corpus(p)
                .map(Arc::new)
                .with_context(|| format!("ingesting corpus {}", p.display()))
        })
        .transpose()
}

pub fn protocol_config(cfg: &EngineConfig) -> Result<ProtocolConfig> {
    let p = &cfg.protocol;
    let mut screening = parse_plan(&p.screening_plan)?;
    screening.toolkit = p.screening_toolkit.clone();
    Ok(ProtocolConfig {
        max_rounds: p.max_rounds,
        screening,
        further_look: p.further_look,
        further_test: p.further_test,
        oracle_fallback: p.oracle_fallback,
        reentry_screening: p.reentry_screening,
    })
}

fn backends(cfg: &EngineConfig, corpus: Option<&Arc<CorpusHandle>>) -> Result<Backends> {
    let has_url = [Role::Interpreter, Role::Reasoner, Role::ExamOracle]
        .iter()
        .any(|r| cfg.endpoint(*r).is_some());
    let kind = match cfg.backends.kind {
        BackendKind::Auto if cfg.backends.world.is_some() && corpus.is_some() => BackendKind::Simulated,
        BackendKind::Auto if has_url => BackendKind::Http,
        BackendKind::Auto => BackendKind::None,
        k => k,
    };
    Ok(match kind {
        BackendKind::Simulated => {
            let path = cfg
                .backends
                .world
                .as_ref()
                .context("simulated backend needs backends.world")?;
            let corpus = corpus.context("simulated backend needs a corpus")?;
            let world = WorldFile::load(path)?;
            info!(world = %path.display(), "using simulated backend");
            Backends::shared(Arc::new(world.backend(corpus.clone())))
        }
        BackendKind::Http => {
            let client = |role| -> Result<Arc<dyn Backend>> {
                let e = cfg
                    .endpoint(role)
                    .with_context(|| format!("no URL configured for the {role} backend"))?;
                Ok(Arc::new(HttpBackend::new(e)?))
            };
            let oracle = cfg
                .endpoint(Role::ExamOracle)
                .map(|e| HttpBackend::new(e).map(|b| Arc::new(b) as Arc<dyn Backend>))
                .transpose()?;
            Backends {
                interpreter: client(Role::Interpreter)?,
                reasoner: client(Role::Reasoner)?,
                exam_oracle: oracle,
            }
        }
        BackendKind::None | BackendKind::Auto => Backends::shared(Arc::new(Offline)),
    })
}

pub fn build_context(cfg: &EngineConfig) -> Result<EngineContext> {
    let corpus = load_corpus(cfg)?;
    let mut ctx = EngineContext::new(backends(cfg, corpus.as_ref())?);
    if let Some(c) = corpus {
        ctx = ctx.with_corpus(c);
    }
    if let Some(dir) = &cfg.toolkits {
        ctx = ctx.with_toolkits(load_toolkits(dir)?);
    }
    ctx.config = protocol_config(cfg)?;
    ctx.registry = ctx.registry.with_icl_count(cfg.protocol.icl_references);
    Ok(ctx)
}

pub fn judge(cfg: &EngineConfig) -> Result<RuleBasedJudge> {
    Ok(match &cfg.reward.tables {
        Some(p) => RuleBasedJudge::new(JudgeTables::from_json(&read(p)?)?),
        None => RuleBasedJudge::default(),
    })
}

pub fn tool_rules(cfg: &EngineConfig) -> Result<ToolRuleSet> {
    Ok(match &cfg.reward.rules {
        Some(p) => ToolRuleSet::from_json(&read(p)?)?,
        None => ToolRuleSet::default_rules(),
    })
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn require<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T> {
    match value {
        Some(v) => Ok(v),
        None => bail!("{what} is not set"),
    }
}
