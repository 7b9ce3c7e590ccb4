//! Engine configuration.
//!
//! Layers, later ones winning: built-in defaults, the `--config` TOML file,
//! `ENGINE_*` environment variables, then command-line flags (including any
//! number of `--set key=value` overrides with dotted keys).

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use evidence_core::backends::BackendEndpoint;
use evidence_core::protocol::ProtocolConfig;
use evidence_core::reward::RewardConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Short timeouts, no retries.
    Test,
    #[default]
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Simulated when a `world.json` sits next to the corpus, else HTTP.
    #[default]
    Auto,
    Http,
    Simulated,
    /// No model server; every call fails as unavailable.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Shared base URL; per-role URLs below override it.
    pub base_url: Option<String>,
    pub interpreter_url: Option<String>,
    pub reasoner_url: Option<String>,
    pub exam_oracle_url: Option<String>,
    pub token: Option<String>,
    pub timeout_ms: Option<u64>,
    pub retry_budget: Option<u32>,
    /// Simulated-world description; defaults to `world.json` beside the corpus.
    pub world: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Auto,
            base_url: None,
            interpreter_url: None,
            reasoner_url: None,
            exam_oracle_url: None,
            token: None,
            timeout_ms: None,
            retry_budget: None,
            world: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub max_rounds: usize,
    /// RoI plan name such as `top3@10x+top3@20x+rand2@10x`.
    pub screening_plan: String,
    pub screening_toolkit: String,
    pub further_look: bool,
    pub further_test: bool,
    pub oracle_fallback: bool,
    pub reentry_screening: bool,
    pub icl_references: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            max_rounds: p.max_rounds,
            screening_plan: p.screening.name.clone(),
            screening_toolkit: p.screening.toolkit.clone(),
            further_look: p.further_look,
            further_test: p.further_test,
            oracle_fallback: p.oracle_fallback,
            reentry_screening: p.reentry_screening,
            icl_references: evidence_core::protocol::DEFAULT_ICL_REFERENCES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub format_penalty: f64,
    pub hacking_penalty: f64,
    pub consistency_bonus: f64,
    pub tool_bonus: f64,
    pub alpha: f64,
    /// Tool rule JSON replacing the bundled one.
    pub rules: Option<PathBuf>,
    /// Judge tables JSON replacing the bundled ones.
    pub tables: Option<PathBuf>,
}

impl Default for RewardSection {
    fn default() -> Self {
        let r = RewardConfig::default();
        Self {
            format_penalty: r.format_penalty,
            hacking_penalty: r.hacking_penalty,
            consistency_bonus: r.consistency_bonus,
            tool_bonus: r.tool_bonus,
            alpha: r.alpha,
            rules: None,
            tables: None,
        }
    }
}

impl RewardSection {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            format_penalty: self.format_penalty,
            hacking_penalty: self.hacking_penalty,
            consistency_bonus: self.consistency_bonus,
            tool_bonus: self.tool_bonus,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub addr: String,
    pub token: Option<String>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub profile: Profile,
    /// Embedding corpus directory.
    pub corpus: Option<PathBuf>,
    /// Toolkit directory.
    pub toolkits: Option<PathBuf>,
    pub seed: u64,
    pub parallelism: usize,
    pub protocol: ProtocolSection,
    pub backends: BackendConfig,
    pub reward: RewardSection,
    pub service: ServiceSection,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Live,
            corpus: None,
            toolkits: None,
            seed: 0,
            parallelism: 1,
            protocol: ProtocolSection::default(),
            backends: BackendConfig::default(),
            reward: RewardSection::default(),
            service: ServiceSection::default(),
        }
    }
}

/// Environment variables and the config keys they set.
pub const ENV_KEYS: [(&str, &str); 14] = [
    ("ENGINE_PROFILE", "profile"),
    ("ENGINE_CORPUS", "corpus"),
    ("ENGINE_TOOLKITS", "toolkits"),
    ("ENGINE_SEED", "seed"),
    ("ENGINE_PARALLELISM", "parallelism"),
    ("ENGINE_MAX_ROUNDS", "protocol.max_rounds"),
    ("ENGINE_BACKEND", "backends.kind"),
    ("ENGINE_BACKEND_URL", "backends.base_url"),
    ("ENGINE_INTERPRETER_URL", "backends.interpreter_url"),
    ("ENGINE_REASONER_URL", "backends.reasoner_url"),
    ("ENGINE_EXAM_ORACLE_URL", "backends.exam_oracle_url"),
    ("ENGINE_BACKEND_TOKEN", "backends.token"),
    ("ENGINE_WORLD", "backends.world"),
    ("ENGINE_SERVICE_TOKEN", "service.token"),
];

/// A scalar from the environment or a flag: TOML literal when it parses as
/// one, plain string otherwise.
fn scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).context("empty config key")?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key {key}: {p} is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Where each layer comes from, for tests and `--help` text.
pub struct Layers<'a> {
    pub file: Option<&'a Path>,
    pub env: Vec<(String, String)>,
    /// `key=value` overrides in flag order.
    pub flags: Vec<(String, String)>,
}

impl EngineConfig {
    pub fn load(layers: &Layers<'_>) -> Result<Self> {
        let mut table = Table::try_from(EngineConfig::default()).context("serializing defaults")?;
        if let Some(path) = layers.file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let file: Table =
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut table, file);
        }
        for (var, value) in &layers.env {
            if let Some((_, key)) = ENV_KEYS.iter().find(|(v, _)| v == var) {
                set_path(&mut table, key, scalar(value))?;
            }
        }
        for (key, value) in &layers.flags {
            set_path(&mut table, key, scalar(value))?;
        }
        let cfg: EngineConfig = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.reward_config().validate()?;
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.protocol.max_rounds == 0 {
            bail!("protocol.max_rounds must be at least 1");
        }
        for (name, path) in [
            ("corpus", &self.corpus),
            ("toolkits", &self.toolkits),
            ("backends.world", &self.backends.world),
            ("reward.rules", &self.reward.rules),
            ("reward.tables", &self.reward.tables),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("{name} path {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, role: evidence_core::backends::Role) -> Option<BackendEndpoint> {
        use evidence_core::backends::Role;
        let b = &self.backends;
        let url = match role {
            Role::Interpreter => b.interpreter_url.as_ref(),
            Role::Reasoner => b.reasoner_url.as_ref(),
            Role::ExamOracle => b.exam_oracle_url.as_ref(),
            Role::Judge => None,
        }
        .or(b.base_url.as_ref())?;
        let mut e = BackendEndpoint::new(role, url.clone());
        e.token = b.token.clone();
        if self.profile == Profile::Test {
            e.timeout = BackendEndpoint::TEST_TIMEOUT;
            e.retry_budget = 0;
        }
        if let Some(ms) = b.timeout_ms {
            e.timeout = Duration::from_millis(ms);
        }
        if let Some(n) = b.retry_budget {
            e.retry_budget = n;
        }
        Some(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(file: Option<&str>, env: &[(&str, &str)], flags: &[(&str, &str)]) -> Result<EngineConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.toml");
        if let Some(text) = file {
            std::fs::write(&path, text).unwrap();
        }
        let own = |v: &[(&str, &str)]| v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        EngineConfig::load(&Layers {
            file: file.map(|_| path.as_path()),
            env: own(env),
            flags: own(flags),
        })
    }

    #[test]
    fn flags_beat_env_beat_file_beat_defaults() {
        assert_eq!(load(None, &[], &[]).unwrap().seed, 0);
        let file = "seed = 1\nparallelism = 3\n[protocol]\nmax_rounds = 5\n";
        assert_eq!(load(Some(file), &[], &[]).unwrap().seed, 1);
        let cfg = load(Some(file), &[("ENGINE_SEED", "2")], &[]).unwrap();
        assert_eq!((cfg.seed, cfg.parallelism), (2, 3));
        let cfg = load(Some(file), &[("ENGINE_SEED", "2")], &[("seed", "4"), ("protocol.further_test", "false")]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.protocol.max_rounds, 5);
        assert!(!cfg.protocol.further_test);
        assert!(cfg.protocol.further_look);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(load(Some("seed = \"x\""), &[], &[]).is_err());
        assert!(load(Some("unknown_key = 1"), &[], &[]).is_err());
        assert!(load(None, &[], &[("reward.alpha", "0")]).is_err());
        assert!(load(None, &[], &[("corpus", "/does/not/exist")]).is_err());
        assert!(load(None, &[], &[("parallelism", "0")]).is_err());
    }

    #[test]
    fn string_values_need_no_quotes() {
        let cfg = load(None, &[("ENGINE_BACKEND_URL", "http://127.0.0.1:9")], &[("profile", "test")]).unwrap();
        assert_eq!(cfg.profile, Profile::Test);
        let e = cfg.endpoint(evidence_core::backends::Role::Reasoner).unwrap();
        assert_eq!(e.url(), "http://127.0.0.1:9/v1/reasoner");
        assert_eq!(e.retry_budget, 0);
    }
}
