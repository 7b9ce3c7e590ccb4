//! Verifiable reward over a parsed reasoner reply.
//!
//! A reply with format errors scores `-P_f * n_f` and nothing else. A clean
//! reply scores the rank-sensitive diagnostic reward plus the examination
//! consistency and tool-call terms, minus the hacking penalty when the judge
//! flags one.

mod judge;
mod rules;

pub use judge::{
    exam_mentions, exam_tokens, normalize, ExamQuality, Judge, JudgeError, JudgeTables, JudgeVerdict, RuleBasedJudge,
};
pub use rules::{toolcall_reward, ToolRule, ToolRuleSet, ToolScope};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::ParsedResponse;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("rule file error: {0}")]
    Rules(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub format_penalty: f64,
    pub hacking_penalty: f64,
    pub consistency_bonus: f64,
    pub tool_bonus: f64,
    /// Rank temperature; smaller values concentrate reward on the top rank.
    pub alpha: f64,
}

/// Rank temperature for replies written without further examination results.
pub const ALPHA_PRELIMINARY: f64 = 0.5;
/// Rank temperature for replies written with further examination results.
pub const ALPHA_WITH_RESULTS: f64 = 2.0;

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            format_penalty: 0.5,
            hacking_penalty: 0.3,
            consistency_bonus: 0.1,
            tool_bonus: 0.1,
            alpha: ALPHA_PRELIMINARY,
        }
    }
}

impl RewardConfig {
    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let named = [
            ("format_penalty", self.format_penalty),
            ("hacking_penalty", self.hacking_penalty),
            ("consistency_bonus", self.consistency_bonus),
            ("tool_bonus", self.tool_bonus),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RewardError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(RewardError::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_d: f64,
    pub r_e: f64,
    pub r_t: f64,
    pub hacking: bool,
    pub n_f: u8,
    pub total: f64,
}

/// Softmax-over-rank weight of position `match_position` (1-based) in a
/// list of `list_len` diagnoses; 0 when there is no match.
pub fn diagnostic_reward(
    list_len: usize,
    match_position: Option<usize>,
    alpha: f64,
) -> Result<f64, RewardError> {
    if !(alpha > 0.0) {
        return Err(RewardError::Contract(format!("alpha must be > 0, got {alpha}")));
    }
    let Some(i) = match_position else {
        return Ok(0.0);
    };
    if list_len == 0 {
        return Err(RewardError::Contract(
            "match position given for an empty diagnosis list".into(),
        ));
    }
    if i == 0 || i > list_len {
        return Err(RewardError::Contract(format!(
            "match position {i} outside 1..={list_len}"
        )));
    }
    // Shifting every exponent by 1/alpha leaves the ratio unchanged and keeps
    // the leading term at exp(0).
    let weight = |j: usize| (-((j - 1) as f64) / alpha).exp();
    let denom: f64 = (1..=list_len).map(weight).sum();
    Ok(weight(i) / denom)
}

pub fn consistency_reward(quality: ExamQuality, bonus: f64) -> f64 {
    match quality {
        ExamQuality::Differentiates => bonus,
        ExamQuality::Neutral => 0.0,
        ExamQuality::Problematic => -bonus,
    }
}

pub fn total_reward(
    parsed: &ParsedResponse,
    verdict: &JudgeVerdict,
    cfg: &RewardConfig,
    rules: &ToolRuleSet,
) -> Result<RewardBreakdown, RewardError> {
    let n_f = parsed.format_errors;
    if n_f > 0 {
        return Ok(RewardBreakdown {
            r_d: 0.0,
            r_e: 0.0,
            r_t: 0.0,
            hacking: false,
            n_f,
            total: -cfg.format_penalty * f64::from(n_f),
        });
    }
    let diagnoses = parsed.diagnoses();
    let diagnostic = diagnostic_reward(diagnoses.len(), verdict.match_position, cfg.alpha)?;
    let consistency = consistency_reward(verdict.exam_quality, cfg.consistency_bonus);
    let toolcall = toolcall_reward(parsed.tools(), &diagnoses, rules, cfg.tool_bonus);
    let penalty = if verdict.hacking {
        cfg.hacking_penalty
    } else {
        0.0
    };
    Ok(RewardBreakdown {
        r_d: diagnostic,
        r_e: consistency,
        r_t: toolcall,
        hacking: verdict.hacking,
        n_f: 0,
        total: diagnostic + consistency + toolcall - penalty,
    })
}
