//! Reasoner output grammar.
//!
//! A well-formed reply carries exactly one `<think>…</think>` block followed
//! by exactly one `<answer>…</answer>` block. Inside the answer the reasoner
//! uses brace-delimited markers:
//!
//! ```text
//! \DiffList{Diagnosis 1, Diagnosis 2, ...}
//! \ExamList{Item 1, Item 2, ...}
//! \ToolCallList{Tool 1, Tool 2, ...}
//! \boxed{Diagnosis Name}
//! ```
//!
//! List items split on commas outside any bracket pair, so
//! `Immunohistochemistry (CK7, CK20)` stays one item. Parsing never fails;
//! problems are counted in [`ParsedResponse::format_errors`].

use serde::{Deserialize, Serialize};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

pub const DIFF_MARKER: &str = "\\DiffList";
pub const EXAM_MARKER: &str = "\\ExamList";
pub const TOOL_MARKER: &str = "\\ToolCallList";
pub const BOXED_MARKER: &str = "\\boxed";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think: Option<String>,
    pub answer: Option<String>,
    /// `None` when the marker is absent; `Some(vec![])` for empty braces.
    pub diff_list: Option<Vec<String>>,
    pub exam_list: Option<Vec<String>>,
    pub tool_list: Option<Vec<String>>,
    pub boxed: Option<String>,
    /// Zero, one or both of: tag-structure error, answer-presentation error.
    pub format_errors: u8,
    pub tag_error: bool,
    pub presentation_error: bool,
}

impl ParsedResponse {
    pub fn diffs(&self) -> &[String] {
        self.diff_list.as_deref().unwrap_or(&[])
    }

    pub fn exams(&self) -> &[String] {
        self.exam_list.as_deref().unwrap_or(&[])
    }

    pub fn tools(&self) -> &[String] {
        self.tool_list.as_deref().unwrap_or(&[])
    }

    /// `\ExamList{}` was written with nothing inside.
    pub fn exam_list_empty(&self) -> bool {
        matches!(&self.exam_list, Some(v) if v.is_empty())
    }

    pub fn is_well_formed(&self) -> bool {
        self.format_errors == 0
    }

    /// The ordered diagnosis list used for scoring: the differential when one
    /// is given, else the boxed diagnosis alone.
    pub fn diagnoses(&self) -> Vec<String> {
        match (&self.diff_list, &self.boxed) {
            (Some(d), _) if !d.is_empty() => d.clone(),
            (_, Some(b)) => vec![b.clone()],
            _ => Vec::new(),
        }
    }
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// Byte range of one tag pair's content, if the pair is unique and ordered.
fn single_block(raw: &str, open: &str, close: &str) -> (Option<(usize, usize)>, bool) {
    let opens = find_all(raw, open);
    let closes = find_all(raw, close);
    match (opens.as_slice(), closes.as_slice()) {
        ([o], [c]) if o + open.len() <= *c => (Some((o + open.len(), *c)), true),
        ([o, ..], [.., c]) if o + open.len() <= *c => (Some((o + open.len(), *c)), false),
        _ => (None, false),
    }
}

/// Content between the brace that follows `marker` and its matching close,
/// for the first occurrence that is well formed. `Err(())` when the marker
/// occurs but no occurrence closes.
fn marker_body<'a>(text: &'a str, marker: &str, last: bool) -> Option<Result<&'a str, ()>> {
    let mut hits: Vec<usize> = find_all(text, marker);
    if hits.is_empty() {
        return None;
    }
    if last {
        hits.reverse();
    }
    for start in hits {
        let after = &text[start + marker.len()..];
        let trimmed = after.trim_start_matches([' ', '\t']);
        if !trimmed.starts_with('{') {
            continue;
        }
        let body_start = text.len() - trimmed.len() + 1;
        let mut depth = 1usize;
        for (i, ch) in text[body_start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(Ok(&text[body_start..body_start + i]));
                    }
                }
                _ => {}
            }
        }
    }
    Some(Err(()))
}

/// Split on commas that sit outside (), [], {} and full-width parentheses.
pub fn split_items(body: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in body.char_indices() {
        match ch {
            '(' | '[' | '{' | '（' => depth += 1,
            ')' | ']' | '}' | '）' => depth = depth.saturating_sub(1),
            ',' | '，' if depth == 0 => {
                items.push(body[start..i].trim().to_string());
                start = i + ch.len_utf8();
            }
            _ => {}
        }
    }
    items.push(body[start..].trim().to_string());
    items.retain(|s| !s.is_empty());
    items
}

/// Parse a raw reasoner reply. Total over all inputs.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let (think, think_unique) = single_block(raw, THINK_OPEN, THINK_CLOSE);
    let (answer, answer_unique) = single_block(raw, ANSWER_OPEN, ANSWER_CLOSE);
    let ordered = match (think, answer) {
        (Some((_, think_end)), Some((answer_start, _))) => {
            think_end + THINK_CLOSE.len() <= answer_start - ANSWER_OPEN.len()
        }
        _ => false,
    };
    let tag_error = !(think_unique && answer_unique && ordered);

    let answer_text = answer.map(|(s, e)| &raw[s..e]);
    let mut out = ParsedResponse {
        think: think.map(|(s, e)| raw[s..e].trim().to_string()),
        answer: answer_text.map(|a| a.trim().to_string()),
        tag_error,
        ..ParsedResponse::default()
    };
    let mut diff_ok = false;
    let mut boxed_ok = false;
    if let Some(text) = answer_text {
        if let Some(Ok(body)) = marker_body(text, DIFF_MARKER, false) {
            let items = split_items(body);
            diff_ok = !items.is_empty();
            out.diff_list = Some(items);
        }
        if let Some(Ok(body)) = marker_body(text, EXAM_MARKER, false) {
            out.exam_list = Some(split_items(body));
        }
        if let Some(Ok(body)) = marker_body(text, TOOL_MARKER, false) {
            out.tool_list = Some(split_items(body));
        }
        if let Some(Ok(body)) = marker_body(text, BOXED_MARKER, true) {
            let b = body.trim();
            if !b.is_empty() {
                boxed_ok = true;
                out.boxed = Some(b.to_string());
            }
        }
    }
    out.presentation_error = !(diff_ok || boxed_ok);
    out.format_errors = u8::from(out.tag_error) + u8::from(out.presentation_error);
    out
}

/// Serialize the structured fields back into the grammar.
pub fn render_response(parsed: &ParsedResponse) -> String {
    let mut answer = String::new();
    let mut line = |marker: &str, items: &Option<Vec<String>>| {
        if let Some(items) = items {
            answer.push_str(marker);
            answer.push('{');
            answer.push_str(&items.join(", "));
            answer.push_str("}\n");
        }
    };
    line(DIFF_MARKER, &parsed.diff_list);
    line(EXAM_MARKER, &parsed.exam_list);
    line(TOOL_MARKER, &parsed.tool_list);
    if let Some(b) = &parsed.boxed {
        answer.push_str(BOXED_MARKER);
        answer.push('{');
        answer.push_str(b);
        answer.push_str("}\n");
    }
    format!(
        "{THINK_OPEN}\n{}\n{THINK_CLOSE}\n\n{ANSWER_OPEN}\n{}{ANSWER_CLOSE}",
        parsed.think.as_deref().unwrap_or(""),
        answer
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxed_only_answer() {
        let p = parse_response("<think>x</think><answer>\\boxed{Gastric adenocarcinoma}</answer>");
        assert_eq!(p.format_errors, 0);
        assert_eq!(p.boxed.as_deref(), Some("Gastric adenocarcinoma"));
        assert_eq!(p.think.as_deref(), Some("x"));
    }

    #[test]
    fn parenthesised_abbreviations_stay_intact() {
        let raw = "<think>…</think><answer>\\DiffList{Clear cell renal cell carcinoma (ccRCC), \
                   Chromophobe renal cell carcinoma (chRCC), Papillary renal cell carcinoma (pRCC)}\
                   …</answer>";
        let p = parse_response(raw);
        assert_eq!(p.format_errors, 0);
        assert_eq!(
            p.diffs(),
            [
                "Clear cell renal cell carcinoma (ccRCC)",
                "Chromophobe renal cell carcinoma (chRCC)",
                "Papillary renal cell carcinoma (pRCC)"
            ]
        );
    }

    #[test]
    fn untagged_text_has_both_errors() {
        let p = parse_response("just some prose about a kidney");
        assert_eq!(p.format_errors, 2);
        assert_eq!(p, ParsedResponse {
            format_errors: 2,
            tag_error: true,
            presentation_error: true,
            ..ParsedResponse::default()
        });
    }

    #[test]
    fn duplicated_think_is_a_tag_error_only() {
        let p = parse_response("<think>a</think><think>b</think><answer>\\boxed{X}</answer>");
        assert!(p.tag_error);
        assert!(!p.presentation_error);
        assert_eq!(p.format_errors, 1);
    }

    #[test]
    fn answer_before_think_is_a_tag_error() {
        let p = parse_response("<answer>\\boxed{X}</answer><think>a</think>");
        assert!(p.tag_error);
    }

    #[test]
    fn answer_without_list_or_box_is_a_presentation_error() {
        let p = parse_response("<think>a</think><answer>\\ExamList{CK7}</answer>");
        assert!(!p.tag_error);
        assert!(p.presentation_error);
        assert_eq!(p.exams(), ["CK7"]);
    }

    #[test]
    fn unclosed_marker_is_not_well_formed() {
        let p = parse_response("<think>a</think><answer>\\boxed{X</answer>");
        assert!(p.presentation_error);
        assert_eq!(p.boxed, None);
    }

    #[test]
    fn empty_lists_are_present_but_empty() {
        let p = parse_response(
            "<think>a</think><answer>\\DiffList{A}\\ExamList{}\\ToolCallList{ }</answer>",
        );
        assert_eq!(p.format_errors, 0);
        assert!(p.exam_list_empty());
        assert_eq!(p.tool_list, Some(vec![]));
    }

    #[test]
    fn nested_braces_inside_items() {
        let p = parse_response("<think>a</think><answer>\\boxed{\\text{Thymic carcinoma}}</answer>");
        assert_eq!(p.boxed.as_deref(), Some("\\text{Thymic carcinoma}"));
        assert_eq!(split_items("A {x, y}, B"), ["A {x, y}", "B"]);
    }

    #[test]
    fn tool_names_are_trimmed_and_case_preserved() {
        let p = parse_response(
            "<think>t</think><answer>\\DiffList{A}\\ToolCallList{ tool-ccRCC ,tool-Nuclear}</answer>",
        );
        assert_eq!(p.tools(), ["tool-ccRCC", "tool-Nuclear"]);
    }
}
