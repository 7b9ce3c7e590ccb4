use std::collections::BTreeSet;

use rand::Rng;
use serde_json::json;
use tracing::{debug, warn};

use super::{
    EngineContext, Evidence, IclVerdict, ReportKind, SessionError, ToolPlan, ToolSpec,
};
use crate::backends::{BackendRequest, InterpreterMode};
use crate::highlight::{
    gleason_area_map, ground_regions, kmeans_rois, localize_entities, select_rois_region,
    similarity_for_block, HighlightError, PatchGrid, RoiSelection, Toolkit,
};
use crate::prompt::{render_prompt, PromptContext, PromptStage, INTERPRETER_ICL};
use crate::store::CorpusHandle;

/// Leading yes/no of an interpreter reply; `None` when it is neither.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn corpus(ctx: &EngineContext) -> Result<&CorpusHandle, SessionError> {
    ctx.corpus
        .as_deref()
        .ok_or_else(|| SessionError::Config("no corpus loaded".into()))
}

/// Pan-cancer screening RoIs for the slide. Steps whose level is missing
/// from the slide or the toolkit are skipped; an empty result means no
/// suspicious region was highlighted.
pub fn screen_slide<R: Rng + ?Sized>(
    ctx: &EngineContext,
    slide_id: &str,
    rng: &mut R,
) -> Result<RoiSelection, SessionError> {
    let plan = &ctx.config.screening;
    let toolkit = ctx.toolkit(&plan.toolkit)?;
    let corpus = corpus(ctx)?;
    if corpus.slide(slide_id).is_none() {
        return Err(SessionError::Config(format!("slide {slide_id:?} is not in the corpus")));
    }
    let mut merged = RoiSelection {
        plan_name: plan.name.clone(),
        ..RoiSelection::default()
    };
    for step in &plan.steps {
        let tk = toolkit.at_level(step.level);
        if tk.prototypes.is_empty() || tk.highlight_set.is_empty() {
            debug!(level = %step.level, "screening toolkit has no prototypes at level");
            continue;
        }
        let Ok(block) = corpus.block(slide_id, step.level) else {
            debug!(level = %step.level, "slide has no patches at level");
            continue;
        };
        let s = similarity_for_block(block, &tk)?;
        let grounding = ground_regions(&s, &tk)?;
        let grid = PatchGrid::from_block(slide_id, step.level, block);
        match select_rois_region(
            &grounding.highlighted,
            &s,
            &tk,
            &grid,
            step.k_top,
            step.k_random,
            rng,
            &plan.name,
        ) {
            Ok(sel) => {
                merged.shortfall |= sel.shortfall;
                merged.extend(sel);
            }
            Err(HighlightError::EmptyHighlight) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(merged)
}

/// Per-description RoIs for a localization tool, merged across levels in
/// first-seen order.
fn localize(
    ctx: &EngineContext,
    spec: &ToolSpec,
    base: &Toolkit,
    slide_id: &str,
    levels: &[crate::store::Level],
    k: usize,
    kmeans_extra: usize,
) -> Result<Vec<(String, RoiSelection)>, SessionError> {
    let corpus = corpus(ctx)?;
    let plan_name = spec.plan_name();
    let mut out: Vec<(String, RoiSelection)> = Vec::new();
    for &level in levels {
        let tk = base.at_level(level);
        if tk.prototypes.is_empty() {
            continue;
        }
        let Ok(block) = corpus.block(slide_id, level) else {
            continue;
        };
        let s = similarity_for_block(block, &tk)?;
        let grid = PatchGrid::from_block(slide_id, level, block);
        for mut loc in localize_entities(&s, &tk, &grid, k, &plan_name)? {
            if kmeans_extra > 0 {
                let exclude: BTreeSet<usize> =
                    loc.selection.entries.iter().map(|e| e.index).collect();
                let extra = kmeans_rois(&s, &tk, &grid, &loc.description, kmeans_extra, &exclude);
                loc.selection.shortfall |= extra.len() < kmeans_extra;
                loc.selection.entries.extend(extra);
            }
            match out.iter_mut().find(|(d, _)| *d == loc.description) {
                Some((_, sel)) => sel.extend(loc.selection),
                None => out.push((loc.description, loc.selection)),
            }
        }
    }
    Ok(out)
}

fn grade_of(category: &str) -> Option<u32> {
    let digits: String = category.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn summarize(report: &ReportKind, verdicts: &[IclVerdict]) -> String {
    let any_yes = verdicts.iter().any(|v| v.answer == Some(true));
    let any_answer = verdicts.iter().any(|v| v.answer.is_some());
    match report {
        ReportKind::Presence { label } => {
            let word = if any_yes {
                "positive"
            } else if any_answer {
                "negative"
            } else {
                "inconclusive"
            };
            format!("{label}: {word}")
        }
        ReportKind::Detection { label } => {
            let word = if any_yes {
                "detected"
            } else if any_answer {
                "not detected"
            } else {
                "inconclusive"
            };
            format!("{label}: {word}")
        }
        ReportKind::Grade { label } => {
            let grade = verdicts
                .iter()
                .filter(|v| v.answer == Some(true))
                .filter_map(|v| grade_of(&v.category))
                .max();
            match grade {
                Some(g) => format!("{label}: {g}"),
                None => format!("{label}: undetermined"),
            }
        }
        ReportKind::Gleason => "Gleason score: undetermined".into(),
    }
}

fn gleason_report(
    ctx: &EngineContext,
    toolkit: &Toolkit,
    slide_id: &str,
    level: crate::store::Level,
) -> Result<(String, RoiSelection), SessionError> {
    let corpus = corpus(ctx)?;
    let tk = toolkit.at_level(level);
    let block = corpus.block(slide_id, level).map_err(HighlightError::from)?;
    let s = similarity_for_block(block, &tk)?;
    let grid = PatchGrid::from_block(slide_id, level, block);
    let pitch = corpus
        .slide(slide_id)
        .and_then(|m| m.levels.get(&level))
        .map_or(1.0, |e| f64::from(e.pitch_px));
    let map = match gleason_area_map(&s, &tk, pitch * pitch) {
        Ok(m) => m,
        Err(HighlightError::NoTumor) => {
            return Ok(("Gleason score: no tumor pattern found".into(), RoiSelection::default()))
        }
        Err(e) => return Err(e.into()),
    };
    let tumor: f64 = ["G3", "G4", "G5"]
        .iter()
        .map(|c| map.areas.get(*c).copied().unwrap_or(0.0))
        .sum();
    let shares: Vec<String> = ["G3", "G4", "G5"]
        .iter()
        .map(|c| {
            let a = map.areas.get(*c).copied().unwrap_or(0.0);
            format!("{c} {:.1}%", 100.0 * a / tumor)
        })
        .collect();
    // The highlighted map itself is the artifact: every tumor-pattern patch.
    let entries = map
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| ["G3", "G4", "G5"].contains(&l.as_str()))
        .map(|(n, _)| crate::highlight::RoiEntry {
            index: n,
            image_id: grid.image_id(n),
            level,
            score: None,
            provenance: crate::highlight::Provenance::Topk,
        })
        .collect();
    let report = format!(
        "Gleason score: {} ({} of tumor area)",
        map.call.score(),
        shares.join(", ")
    );
    Ok((
        report,
        RoiSelection {
            plan_name: format!("areamap@{level}"),
            entries,
            shortfall: false,
        },
    ))
}

/// Run one registered tool against the slide and ask the interpreter about
/// each queried description.
pub(crate) fn run_tool(
    ctx: &EngineContext,
    spec: &ToolSpec,
    slide_id: Option<&str>,
    case_info: &str,
    round: usize,
) -> Evidence {
    let skipped = |reason: String| {
        warn!(tool = %spec.name, %reason, "tool skipped");
        Evidence::ToolSkipped {
            round,
            tool: spec.name.clone(),
            reason,
        }
    };
    let Some(slide_id) = slide_id else {
        return skipped("no slide attached to the case".into());
    };
    let toolkit = match ctx.toolkit(&spec.toolkit) {
        Ok(t) => t,
        Err(e) => return skipped(e.to_string()),
    };
    let base = if spec.categories.is_empty() {
        toolkit.clone()
    } else {
        toolkit.with_categories(&spec.categories)
    };
    match &spec.plan {
        ToolPlan::GleasonMap { level } => match gleason_report(ctx, &base, slide_id, *level) {
            Ok((report, selection)) => Evidence::Observation {
                round,
                tool: spec.name.clone(),
                report,
                selections: vec![selection],
                verdicts: Vec::new(),
            },
            Err(e) => skipped(e.to_string()),
        },
        ToolPlan::Localize {
            levels,
            k,
            kmeans_extra,
        } => {
            let located = match localize(ctx, spec, &base, slide_id, levels, *k, *kmeans_extra) {
                Ok(l) => l,
                Err(e) => return skipped(e.to_string()),
            };
            if located.is_empty() {
                return skipped("no toolkit prototypes at the slide's levels".into());
            }
            let mut verdicts = Vec::new();
            let mut selections = Vec::new();
            for (description, selection) in located {
                let category = base
                    .prototypes
                    .iter()
                    .find(|p| p.description == description)
                    .map(|p| p.category.clone())
                    .unwrap_or_default();
                let images = selection.image_ids();
                let references: Vec<String> = base
                    .reference_ids(&description)
                    .into_iter()
                    .take(spec.icl_reference_count)
                    .collect();
                let metadata = json!({"tool": spec.name, "description": description});
                let request = if spec.mode == InterpreterMode::Icl && !references.is_empty() {
                    BackendRequest::interpreter_icl(
                        INTERPRETER_ICL.trim_end().to_string(),
                        images.clone(),
                        references.clone(),
                        metadata,
                    )
                } else {
                    let prompt = match render_prompt(
                        PromptStage::InterpreterGeneral,
                        &PromptContext {
                            case_info: Some(case_info.to_string()),
                            ..Default::default()
                        },
                    ) {
                        Ok(p) => format!("{p}\n\n{}", INTERPRETER_ICL.trim_end()),
                        Err(e) => return skipped(e.to_string()),
                    };
                    let mut r = BackendRequest::interpreter_general(prompt, images.clone());
                    r.metadata = metadata;
                    Ok(r)
                };
                let request = match request {
                    Ok(r) => r,
                    Err(e) => return skipped(e.to_string()),
                };
                let reply = match ctx.backends.interpreter.call(&request) {
                    Ok(r) => r.text,
                    Err(e) => return skipped(format!("interpreter unavailable: {e}")),
                };
                verdicts.push(IclVerdict {
                    description,
                    category,
                    mode: request.mode.unwrap_or(InterpreterMode::General),
                    images,
                    references: request.references.clone(),
                    answer: parse_yes_no(&reply),
                    reply,
                });
                selections.push(selection);
            }
            Evidence::Observation {
                round,
                tool: spec.name.clone(),
                report: summarize(&spec.report, &verdicts),
                selections,
                verdicts,
            }
        }
    }
}
