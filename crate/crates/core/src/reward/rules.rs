use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{normalize, RewardError};

const DEFAULT_RULES: &str = include_str!("../../rules/tool_rules.json");

/// Diagnoses a tool may be called for. `"*"` matches everything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolScope {
    pub applies_to: Vec<String>,
}

/// Tools required when the top diagnosis matches any `when` pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRule {
    pub when: Vec<String>,
    pub require: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRuleSet {
    pub tools: BTreeMap<String, ToolScope>,
    pub requirements: Vec<ToolRule>,
}

fn matches_any(text: &str, patterns: &[String]) -> bool {
    patterns
        .iter()
        .any(|p| p == "*" || text.contains(&normalize(p)))
}

impl ToolRuleSet {
    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULES).expect("bundled tool rules parse")
    }

    pub fn from_json(text: &str) -> Result<Self, RewardError> {
        serde_json::from_str(text).map_err(|e| RewardError::Rules(e.to_string()))
    }

    /// Tools the rules require for this top diagnosis, in rule order.
    pub fn required_for(&self, top: &str) -> Vec<String> {
        let top = normalize(top);
        let mut out: Vec<String> = Vec::new();
        for rule in &self.requirements {
            if matches_any(&top, &rule.when) {
                for t in &rule.require {
                    if !out.contains(t) {
                        out.push(t.clone());
                    }
                }
            }
        }
        out
    }

    /// Whether the tool is known and in scope for at least one diagnosis.
    pub fn applicable(&self, tool: &str, diagnoses: &[String]) -> bool {
        let Some(scope) = self.tools.get(tool) else {
            return false;
        };
        diagnoses
            .iter()
            .any(|d| matches_any(&normalize(d), &scope.applies_to))
    }
}

/// `+bonus` when every tool required for the top diagnosis was called and
/// nothing out of scope was; `0` when nothing is required and nothing was
/// called; `-bonus` otherwise. Unknown tool names count as false calls.
pub fn toolcall_reward(
    calls: &[String],
    diagnoses: &[String],
    rules: &ToolRuleSet,
    bonus: f64,
) -> f64 {
    for tool in calls {
        if !rules.tools.contains_key(tool) {
            warn!(tool = %tool, "unknown tool called");
            return -bonus;
        }
        if !rules.applicable(tool, diagnoses) {
            return -bonus;
        }
    }
    let required = diagnoses
        .first()
        .map(|top| rules.required_for(top))
        .unwrap_or_default();
    if required.is_empty() && calls.is_empty() {
        return 0.0;
    }
    if required.iter().all(|r| calls.contains(r)) {
        bonus
    } else {
        -bonus
    }
}
