//! Prompt templates for the reasoner and the vision interpreter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REASONER_SYSTEM: &str = include_str!("../prompts/reasoner_system.txt");
const EXPLORATORY: &str = include_str!("../prompts/exploratory.txt");
const DEFINITIVE: &str = include_str!("../prompts/definitive.txt");
const ONE_PASS: &str = include_str!("../prompts/one_pass.txt");
const INTERPRETER_GENERAL: &str = include_str!("../prompts/interpreter_general.txt");
pub const INTERPRETER_ICL: &str = include_str!("../prompts/interpreter_icl.txt");

const GROUP_INTRO: &str = "Particularly, when the diagnosis involves renal cell carcinoma, you can \
call the relevant tools to further observe the original images and collect evidence. The tools include: ";
const NO_TOOLS: &str =
    "No observation tools are available for this case; leave the tool call list empty. ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("prompt for {stage:?} needs context field `{field}`")]
    MissingField { stage: PromptStage, field: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    /// Initial differential diagnosis and action plan.
    Exploration,
    /// Final decision after evidence has been gathered.
    Exploitation,
    /// Single-turn diagnosis with no evidence round.
    OnePass,
    InterpreterGeneral,
    InterpreterIcl,
}

/// How a tool is introduced to the reasoner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RosterEntry {
    /// Listed inside the renal observation-tool sentence as `<phrase> (<tool>)`.
    Grouped { phrase: String },
    /// A standalone sentence; `{tool}` is replaced by the tool name.
    Sentence { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterTool {
    pub name: String,
    pub entry: RosterEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptContext {
    pub case_info: Option<String>,
    pub exam_results: Option<String>,
    pub observations: Option<String>,
    pub tools: Vec<RosterTool>,
}

/// Replace `{key}` placeholders in one pass; substituted text is not rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (key, value) in values {
            let slot_len = key.len() + 2;
            if tail.len() >= slot_len
                && tail.as_bytes()[slot_len - 1] == b'}'
                && &tail[1..slot_len - 1] == *key
            {
                out.push_str(value);
                rest = &tail[slot_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn join_oxford(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// The tool paragraph of the exploratory prompt for a given roster.
pub fn tool_roster_text(tools: &[RosterTool]) -> String {
    if tools.is_empty() {
        return NO_TOOLS.to_string();
    }
    let mut text = String::new();
    let grouped: Vec<String> = tools
        .iter()
        .filter_map(|t| match &t.entry {
            RosterEntry::Grouped { phrase } => Some(format!("{phrase} ({})", t.name)),
            RosterEntry::Sentence { .. } => None,
        })
        .collect();
    if !grouped.is_empty() {
        text.push_str(GROUP_INTRO);
        text.push_str(&join_oxford(&grouped));
        text.push_str(". ");
    }
    for t in tools {
        if let RosterEntry::Sentence { text: sentence } = &t.entry {
            text.push_str(&sentence.replace("{tool}", &t.name));
            text.push(' ');
        }
    }
    text
}

fn require<'a>(
    stage: PromptStage,
    field: &'static str,
    value: &'a Option<String>,
) -> Result<&'a str, TemplateError> {
    value
        .as_deref()
        .ok_or(TemplateError::MissingField { stage, field })
}

/// Render the user-turn text for `stage`.
pub fn render_prompt(stage: PromptStage, ctx: &PromptContext) -> Result<String, TemplateError> {
    let text = match stage {
        PromptStage::Exploration => {
            let case = require(stage, "case_info", &ctx.case_info)?;
            let roster = tool_roster_text(&ctx.tools);
            fill(
                EXPLORATORY,
                &[("tool_roster", roster.as_str()), ("case_information", case)],
            )
        }
        PromptStage::Exploitation => {
            let exams = require(stage, "exam_results", &ctx.exam_results)?;
            let obs = require(stage, "observations", &ctx.observations)?;
            fill(
                DEFINITIVE,
                &[("exam_results", exams), ("further_observations", obs)],
            )
        }
        PromptStage::OnePass => {
            let case = require(stage, "case_info", &ctx.case_info)?;
            fill(ONE_PASS, &[("case_information", case)])
        }
        PromptStage::InterpreterGeneral => {
            let case = require(stage, "case_info", &ctx.case_info)?;
            fill(INTERPRETER_GENERAL, &[("background", case)])
        }
        PromptStage::InterpreterIcl => INTERPRETER_ICL.to_string(),
    };
    Ok(text.trim_end().to_string())
}

pub fn reasoner_system_prompt() -> &'static str {
    REASONER_SYSTEM.trim_end()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_roster() -> Vec<RosterTool> {
        let grouped = |n: &str, p: &str| RosterTool {
            name: n.into(),
            entry: RosterEntry::Grouped { phrase: p.into() },
        };
        vec![
            grouped("tool-ccRCC", "renal clear cell observation tool"),
            grouped("tool-chRCC", "renal chromophobe cell observation tool"),
            grouped("tool-pRCC", "renal papillary cell observation tool"),
            grouped("tool-Nuclear", "Furhman nuclear grade observation tool"),
            RosterTool {
                name: "tool-Gleason".into(),
                entry: RosterEntry::Sentence {
                    text: "When the diagnosis involves prostate adenocarcinoma, you can call the tool ({tool}) to evaluate the Gleason score.".into(),
                },
            },
            RosterTool {
                name: "tool-invasion".into(),
                entry: RosterEntry::Sentence {
                    text: "When necessary, you can call the invasion detection tool ({tool}) to detect any lymphovascular or perineural invasion.".into(),
                },
            },
        ]
    }

    #[test]
    fn exploration_ends_with_case_information() {
        let ctx = PromptContext {
            case_info: Some("C".into()),
            tools: default_roster(),
            ..Default::default()
        };
        let text = render_prompt(PromptStage::Exploration, &ctx).unwrap();
        assert!(text.ends_with("The following is the case information:\nC"));
        assert!(text.contains("\\DiffList{Diagnosis 1, Diagnosis 2, ...}"));
    }

    #[test]
    fn default_roster_paragraph() {
        let expected = "Particularly, when the diagnosis involves renal cell carcinoma, you can call the relevant tools to further observe the original images and collect evidence. The tools include: renal clear cell observation tool (tool-ccRCC), renal chromophobe cell observation tool (tool-chRCC), renal papillary cell observation tool (tool-pRCC), and Furhman nuclear grade observation tool (tool-Nuclear). When the diagnosis involves prostate adenocarcinoma, you can call the tool (tool-Gleason) to evaluate the Gleason score. When necessary, you can call the invasion detection tool (tool-invasion) to detect any lymphovascular or perineural invasion. ";
        assert_eq!(tool_roster_text(&default_roster()), expected);
    }

    #[test]
    fn roster_lists_only_registered_tools() {
        let mut tools = default_roster();
        tools.retain(|t| t.name == "tool-ccRCC" || t.name == "tool-invasion");
        let text = tool_roster_text(&tools);
        assert!(text.contains("(tool-ccRCC). "));
        assert!(!text.contains("tool-Nuclear"));
        assert!(!text.contains("tool-Gleason"));
        assert_eq!(tool_roster_text(&[]), NO_TOOLS);
    }

    #[test]
    fn exploitation_carries_boxed_instruction() {
        let ctx = PromptContext {
            exam_results: Some("PAX8: Positive".into()),
            observations: Some("ccRCC: positive".into()),
            ..Default::default()
        };
        let text = render_prompt(PromptStage::Exploitation, &ctx).unwrap();
        assert!(text.contains("\\boxed{Diagnosis Name}"));
        assert!(text.ends_with("Results of Further Observations: ccRCC: positive"));
    }

    #[test]
    fn missing_exam_results_is_a_template_error() {
        let ctx = PromptContext {
            observations: Some("none".into()),
            ..Default::default()
        };
        assert_eq!(
            render_prompt(PromptStage::Exploitation, &ctx),
            Err(TemplateError::MissingField {
                stage: PromptStage::Exploitation,
                field: "exam_results"
            })
        );
    }

    #[test]
    fn substituted_text_is_not_rescanned() {
        let ctx = PromptContext {
            case_info: Some("{tool_roster} literally".into()),
            ..Default::default()
        };
        let text = render_prompt(PromptStage::OnePass, &ctx).unwrap();
        assert!(text.ends_with("{tool_roster} literally"));
    }
}
