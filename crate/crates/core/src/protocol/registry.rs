use serde::{Deserialize, Serialize};

use crate::backends::InterpreterMode;
use crate::prompt::{RosterEntry, RosterTool};
use crate::store::Level;

/// Reference images sent with each in-context request by default.
pub const DEFAULT_ICL_REFERENCES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolPlan {
    /// Top-`k` patches per description at each level, plus `kmeans_extra`
    /// patches matched to the description's k-means sub-prototypes.
    Localize {
        levels: Vec<Level>,
        k: usize,
        #[serde(default)]
        kmeans_extra: usize,
    },
    /// Region assignment at one level followed by the Gleason area rule.
    GleasonMap { level: Level },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportKind {
    /// `"{label}: positive"` when any queried description is confirmed.
    Presence { label: String },
    /// `"{label}: n"` for the highest confirmed grade.
    Grade { label: String },
    /// `"{label}: detected"` when any queried description is confirmed.
    Detection { label: String },
    Gleason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub toolkit: String,
    /// Toolkit categories the tool queries; empty means all.
    #[serde(default)]
    pub categories: Vec<String>,
    pub plan: ToolPlan,
    pub mode: InterpreterMode,
    pub icl_reference_count: usize,
    pub report: ReportKind,
    pub roster: RosterEntry,
}

impl ToolSpec {
    pub fn plan_name(&self) -> String {
        match &self.plan {
            ToolPlan::Localize {
                levels,
                k,
                kmeans_extra,
            } => {
                let levels: Vec<&str> = levels.iter().map(|l| l.tag()).collect();
                if *kmeans_extra > 0 {
                    format!("top{k}+kmeans{kmeans_extra}@{}", levels.join("+"))
                } else {
                    format!("top{k}@{}", levels.join("+"))
                }
            }
            ToolPlan::GleasonMap { level } => format!("areamap@{level}"),
        }
    }
}

/// Registered observation tools, in the order they are offered to the
/// reasoner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRegistry {
    pub tools: Vec<ToolSpec>,
}

fn grouped(phrase: &str) -> RosterEntry {
    RosterEntry::Grouped {
        phrase: phrase.into(),
    }
}

fn subtype_tool(name: &str, category: &str, phrase: &str) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        toolkit: "rcc-subtype".into(),
        categories: vec![category.into()],
        plan: ToolPlan::Localize {
            levels: vec![Level::X10],
            k: 3,
            kmeans_extra: 2,
        },
        mode: InterpreterMode::Icl,
        icl_reference_count: DEFAULT_ICL_REFERENCES,
        report: ReportKind::Presence {
            label: category.into(),
        },
        roster: grouped(phrase),
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        let tools = vec![
            subtype_tool("tool-ccRCC", "ccRCC", "renal clear cell observation tool"),
            subtype_tool("tool-chRCC", "chRCC", "renal chromophobe cell observation tool"),
            subtype_tool("tool-pRCC", "pRCC", "renal papillary cell observation tool"),
            ToolSpec {
                name: "tool-Nuclear".into(),
                toolkit: "nuclear-grade".into(),
                categories: ["G1", "G2", "G3", "G4"].map(String::from).to_vec(),
                plan: ToolPlan::Localize {
                    levels: vec![Level::X20],
                    k: 5,
                    kmeans_extra: 0,
                },
                mode: InterpreterMode::Icl,
                icl_reference_count: DEFAULT_ICL_REFERENCES,
                report: ReportKind::Grade {
                    label: "Nuclear grade".into(),
                },
                roster: grouped("Furhman nuclear grade observation tool"),
            },
            ToolSpec {
                name: "tool-Gleason".into(),
                toolkit: "gleason".into(),
                categories: Vec::new(),
                plan: ToolPlan::GleasonMap { level: Level::X20 },
                mode: InterpreterMode::General,
                icl_reference_count: 0,
                report: ReportKind::Gleason,
                roster: RosterEntry::Sentence {
                    text: "When the diagnosis involves prostate adenocarcinoma, you can call the tool ({tool}) to evaluate the Gleason score.".into(),
                },
            },
            ToolSpec {
                name: "tool-invasion".into(),
                toolkit: "invasion".into(),
                categories: ["vessel-invasion", "nerve-invasion"].map(String::from).to_vec(),
                plan: ToolPlan::Localize {
                    levels: vec![Level::X5, Level::X10],
                    k: 5,
                    kmeans_extra: 0,
                },
                mode: InterpreterMode::Icl,
                icl_reference_count: DEFAULT_ICL_REFERENCES,
                report: ReportKind::Detection {
                    label: "Invasion".into(),
                },
                roster: RosterEntry::Sentence {
                    text: "When necessary, you can call the invasion detection tool ({tool}) to detect any lymphovascular or perineural invasion.".into(),
                },
            },
        ];
        Self { tools }
    }
}

impl ToolRegistry {
    pub fn empty() -> Self {
        Self { tools: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn roster(&self) -> Vec<RosterTool> {
        self.tools
            .iter()
            .map(|t| RosterTool {
                name: t.name.clone(),
                entry: t.roster.clone(),
            })
            .collect()
    }

    /// Same registry with every in-context tool sending `n` references;
    /// `n = 0` turns those tools into general-mode calls.
    pub fn with_icl_count(&self, n: usize) -> Self {
        let mut out = self.clone();
        for t in &mut out.tools {
            if matches!(t.report, ReportKind::Gleason) {
                continue;
            }
            t.icl_reference_count = n;
            t.mode = if n == 0 {
                InterpreterMode::General
            } else {
                InterpreterMode::Icl
            };
        }
        out
    }
}
