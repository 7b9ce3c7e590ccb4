use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_TABLES: &str = include_str!("../../rules/judge_tables.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamQuality {
    Differentiates,
    Neutral,
    Problematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// 1-based position of the ground truth in the diagnosis list.
    pub match_position: Option<usize>,
    pub exam_quality: ExamQuality,
    pub hacking: bool,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge tables: {0}")]
    Tables(String),
    #[error("remote judge: {0}")]
    Remote(String),
    #[error("judge reply could not be read: {0}")]
    Reply(String),
}

/// Decides match position, exam quality and hacking for one reply.
pub trait Judge: Send + Sync {
    fn judge(
        &self,
        diagnoses: &[String],
        exams: &[String],
        truth: &str,
    ) -> Result<JudgeVerdict, JudgeError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeTables {
    /// Canonical name to aliases.
    pub synonyms: BTreeMap<String, Vec<String>>,
    /// Terms that may not appear together in one list.
    pub exclusions: Vec<(String, String)>,
    pub vague: Vec<String>,
    /// Exam keyword to the diagnoses it helps tell apart.
    pub exam_keywords: BTreeMap<String, Vec<String>>,
}

impl JudgeTables {
    pub fn default_tables() -> Self {
        Self::from_json(DEFAULT_TABLES).expect("bundled judge tables parse")
    }

    pub fn from_json(text: &str) -> Result<Self, JudgeError> {
        serde_json::from_str(text).map_err(|e| JudgeError::Tables(e.to_string()))
    }
}

/// Casefold, trim, collapse inner whitespace and drop trailing full stops.
pub fn normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches('.').trim().to_string()
}

fn strip_parentheticals(s: &str) -> (String, Vec<String>) {
    let mut outside = String::new();
    let mut inside = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for ch in s.chars() {
        match ch {
            '(' | '（' => {
                if depth == 0 {
                    current.clear();
                } else {
                    current.push(ch);
                }
                depth += 1;
            }
            ')' | '）' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    inside.push(current.clone());
                } else {
                    current.push(ch);
                }
            }
            _ if depth > 0 => current.push(ch),
            _ => outside.push(ch),
        }
    }
    (normalize(&outside), inside.iter().map(|c| normalize(c)).collect())
}

/// Normalized word tokens of an exam item; hyphens and dots stay inside
/// tokens so `Ki-67` and `NKX3.1` survive.
pub fn exam_tokens(exam: &str) -> Vec<String> {
    normalize(exam)
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '.'))
        .map(|t| t.trim_matches(['-', '.']).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Whether `name` (e.g. `PAX8`) answers the requested exam `item`
/// (e.g. `Immunohistochemical staining PAX8`).
pub fn exam_mentions(item: &str, name: &str) -> bool {
    let n = normalize(name);
    normalize(item) == n || exam_tokens(item).contains(&n)
}

#[derive(Debug, Clone)]
pub struct RuleBasedJudge {
    tables: JudgeTables,
    alias_to_canon: BTreeMap<String, String>,
    exclusions: Vec<(String, String)>,
    vague: BTreeSet<String>,
    keywords: BTreeMap<String, Vec<String>>,
}

impl Default for RuleBasedJudge {
    fn default() -> Self {
        Self::new(JudgeTables::default_tables())
    }
}

impl RuleBasedJudge {
    pub fn new(tables: JudgeTables) -> Self {
        let mut alias_to_canon = BTreeMap::new();
        for (canon, aliases) in &tables.synonyms {
            let c = normalize(canon);
            for a in aliases {
                alias_to_canon.insert(normalize(a), c.clone());
            }
            alias_to_canon.insert(c.clone(), c);
        }
        let exclusions = tables
            .exclusions
            .iter()
            .map(|(a, b)| (normalize(a), normalize(b)))
            .collect();
        let vague = tables.vague.iter().map(|v| normalize(v)).collect();
        let mut judge = Self {
            tables: tables.clone(),
            alias_to_canon,
            exclusions,
            vague,
            keywords: BTreeMap::new(),
        };
        judge.keywords = tables
            .exam_keywords
            .iter()
            .map(|(k, ds)| (normalize(k), ds.iter().map(|d| judge.canon(&normalize(d))).collect()))
            .collect();
        judge
    }

    pub fn tables(&self) -> &JudgeTables {
        &self.tables
    }

    fn canon(&self, normalized: &str) -> String {
        self.alias_to_canon
            .get(normalized)
            .cloned()
            .unwrap_or_else(|| normalized.to_string())
    }

    /// The entry's main identity: text before the first comma with
    /// parentheticals removed, mapped through the synonym table.
    pub fn primary_key(&self, entry: &str) -> String {
        let n = normalize(entry);
        let head = n.split(',').next().unwrap_or("").trim();
        let (outside, _) = strip_parentheticals(head);
        self.canon(&outside)
    }

    /// Every name the entry may be referring to.
    pub fn keys(&self, entry: &str) -> BTreeSet<String> {
        let n = normalize(entry);
        let mut raw: Vec<String> = vec![n.clone()];
        let head = n.split(',').next().unwrap_or("").trim().to_string();
        raw.push(head.clone());
        for text in [&n, &head] {
            let (outside, inside) = strip_parentheticals(text);
            raw.push(outside);
            raw.extend(inside);
        }
        // "Thymic carcinoma / thymoma" names both alternatives.
        let mut expanded = Vec::new();
        for r in &raw {
            if r.contains('/') {
                expanded.extend(r.split('/').map(normalize));
            }
        }
        raw.extend(expanded);
        raw.into_iter()
            .filter(|k| !k.is_empty())
            .map(|k| self.canon(&k))
            .collect()
    }

    pub fn same_diagnosis(&self, a: &str, b: &str) -> bool {
        let kb = self.keys(b);
        self.keys(a).iter().any(|k| kb.contains(k))
    }

    pub fn match_position(&self, diagnoses: &[String], truth: &str) -> Option<usize> {
        let truth_keys = self.keys(truth);
        diagnoses
            .iter()
            .position(|d| self.keys(d).iter().any(|k| truth_keys.contains(k)))
            .map(|i| i + 1)
    }

    pub fn is_hacking(&self, diagnoses: &[String]) -> bool {
        let mut seen = BTreeSet::new();
        for d in diagnoses {
            let key = self.primary_key(d);
            if self.vague.contains(&key) || self.vague.contains(&normalize(d)) {
                return true;
            }
            if !seen.insert(key) {
                return true;
            }
        }
        let normalized: Vec<String> = diagnoses.iter().map(|d| normalize(d)).collect();
        self.exclusions.iter().any(|(a, b)| {
            normalized.iter().any(|d| d.contains(a.as_str()))
                && normalized.iter().any(|d| d.contains(b.as_str()))
        })
    }

    /// Keyword heuristic: exams that bear on none of the differentials are
    /// problematic; exams bearing on at least two (or the only one) separate
    /// the list; anything else is neutral.
    pub fn exam_quality(&self, diagnoses: &[String], exams: &[String]) -> ExamQuality {
        let mut targets: BTreeSet<&str> = BTreeSet::new();
        let mut known = false;
        for exam in exams {
            for token in exam_tokens(exam) {
                if let Some(ds) = self.keywords.get(&token) {
                    known = true;
                    targets.extend(ds.iter().map(String::as_str));
                }
            }
        }
        if exams.is_empty() || !known || diagnoses.is_empty() {
            return ExamQuality::Neutral;
        }
        let covered = diagnoses
            .iter()
            .filter(|d| self.keys(d).iter().any(|k| targets.contains(k.as_str())))
            .count();
        if covered == 0 {
            ExamQuality::Problematic
        } else if covered >= diagnoses.len().min(2) {
            ExamQuality::Differentiates
        } else {
            ExamQuality::Neutral
        }
    }
}

impl Judge for RuleBasedJudge {
    fn judge(
        &self,
        diagnoses: &[String],
        exams: &[String],
        truth: &str,
    ) -> Result<JudgeVerdict, JudgeError> {
        Ok(JudgeVerdict {
            match_position: self.match_position(diagnoses, truth),
            exam_quality: self.exam_quality(diagnoses, exams),
            hacking: self.is_hacking(diagnoses),
        })
    }
}
