use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, pct, run_protocol, CaseFixture, EvalEnv, EvalError, MetricsReport, Protocol};
use super::REPORT_SCHEMA_VERSION;
use crate::protocol::{EngineContext, PlanStep, ScreeningPlan};
use crate::store::Level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    EvidenceSources,
    RoiPlan,
    IclCount,
}

impl FromStr for AblationAxis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.replace('-', "_").as_str() {
            "evidence_sources" => Ok(Self::EvidenceSources),
            "roi_plan" => Ok(Self::RoiPlan),
            "icl_count" => Ok(Self::IclCount),
            other => Err(EvalError::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl AblationAxis {
    fn default_grid(self) -> &'static str {
        match self {
            Self::EvidenceSources => "FF,TF,FT,TT",
            Self::RoiPlan => "top1@10x,top3@10x,top6@10x,top3@10x+rand2@10x,top3@10x+top3@20x+rand2@10x",
            Self::IclCount => "0,1,5,10",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridCell {
    Sources { further_look: bool, further_test: bool },
    Plan { plan: ScreeningPlan },
    Icl { references: usize },
}

impl GridCell {
    pub fn label(&self) -> String {
        match self {
            Self::Sources {
                further_look,
                further_test,
            } => format!("{}{}", tf(*further_look), tf(*further_test)),
            Self::Plan { plan } => plan.name.clone(),
            Self::Icl { references } => format!("icl={references}"),
        }
    }

    pub fn apply(&self, ctx: &mut EngineContext) {
        match self {
            Self::Sources {
                further_look,
                further_test,
            } => {
                ctx.config.further_look = *further_look;
                ctx.config.further_test = *further_test;
            }
            Self::Plan { plan } => {
                let toolkit = ctx.config.screening.toolkit.clone();
                ctx.config.screening = ScreeningPlan {
                    toolkit,
                    ..plan.clone()
                };
            }
            Self::Icl { references } => ctx.registry = ctx.registry.with_icl_count(*references),
        }
    }
}

fn tf(b: bool) -> char {
    if b {
        'T'
    } else {
        'F'
    }
}

fn parse_flag(c: char) -> Option<bool> {
    match c.to_ascii_uppercase() {
        'T' => Some(true),
        'F' => Some(false),
        _ => None,
    }
}

/// Parse a plan name such as `top3@10x+top3@20x+rand2@10x`. Terms at the
/// same level merge into one step; steps keep first-appearance order.
pub fn parse_plan(spec: &str) -> Result<ScreeningPlan, EvalError> {
    let bad = |why: &str| EvalError::Config(format!("bad RoI plan {spec:?}: {why}"));
    let mut steps: Vec<PlanStep> = Vec::new();
    for term in spec.split('+').map(str::trim) {
        let (count, level) = term.split_once('@').ok_or_else(|| bad("missing @level"))?;
        let level: Level = level.parse().map_err(|_| bad("unknown level"))?;
        let (random, n) = if let Some(n) = count.strip_prefix("top") {
            (false, n)
        } else if let Some(n) = count.strip_prefix("rand") {
            (true, n)
        } else {
            return Err(bad("terms start with top or rand"));
        };
        let n: usize = n.parse().map_err(|_| bad("count is not a number"))?;
        let step = match steps.iter_mut().find(|s| s.level == level) {
            Some(s) => s,
            None => {
                steps.push(PlanStep {
                    level,
                    k_top: 0,
                    k_random: 0,
                });
                steps.last_mut().expect("just pushed")
            }
        };
        if random {
            step.k_random += n;
        } else {
            step.k_top += n;
        }
    }
    let plan = ScreeningPlan {
        name: spec.trim().to_string(),
        steps,
        ..ScreeningPlan::default()
    };
    if plan.total_rois() == 0 {
        return Err(bad("selects no RoIs"));
    }
    Ok(plan)
}

/// Parse a comma-separated grid for `axis`; `None` gives the default grid.
/// The whole grid is validated before anything runs.
pub fn parse_grid(axis: AblationAxis, spec: Option<&str>) -> Result<Vec<GridCell>, EvalError> {
    let spec = spec.unwrap_or(axis.default_grid());
    let cells = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| match axis {
            AblationAxis::EvidenceSources => {
                let flags: Vec<Option<bool>> = item.chars().map(parse_flag).collect();
                match flags.as_slice() {
                    [Some(look), Some(test)] => Ok(GridCell::Sources {
                        further_look: *look,
                        further_test: *test,
                    }),
                    _ => Err(EvalError::Config(format!(
                        "evidence source cell {item:?} must be two of T/F (look, test)"
                    ))),
                }
            }
            AblationAxis::RoiPlan => parse_plan(item).map(|plan| GridCell::Plan { plan }),
            AblationAxis::IclCount => item
                .parse()
                .map(|references| GridCell::Icl { references })
                .map_err(|_| EvalError::Config(format!("ICL count {item:?} is not a number"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if cells.is_empty() {
        return Err(EvalError::Config("empty ablation grid".into()));
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cell: GridCell,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub axis: AblationAxis,
    pub protocol: Protocol,
    pub rows: Vec<AblationRow>,
}

/// One protocol run per grid cell, all other settings held fixed.
pub fn run_ablation(
    env: &EvalEnv,
    fixtures: &[CaseFixture],
    axis: AblationAxis,
    grid: &[GridCell],
    protocol: Protocol,
) -> Result<AblationReport, EvalError> {
    if fixtures.is_empty() {
        return Err(EvalError::Empty);
    }
    if grid.is_empty() {
        return Err(EvalError::Config("empty ablation grid".into()));
    }
    let rows = grid
        .iter()
        .map(|cell| {
            let mut cell_env = env.clone();
            cell.apply(&mut cell_env.base);
            let runs = run_protocol(&cell_env, fixtures, protocol);
            AblationRow {
                label: cell.label(),
                cell: cell.clone(),
                metrics: evaluate(&cell_env, fixtures, &runs),
            }
        })
        .collect();
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        axis,
        protocol,
        rows,
    })
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let metrics = |m: &MetricsReport| {
            format!(
                "{:>10} {:>10} {:>8} {:>10} {:>8} {:>6}",
                pct(m.initial_bacc),
                pct(m.ddx_bacc),
                m.ddx_length.map_or("-".into(), |l| format!("{l:.2}")),
                pct(m.balanced_accuracy),
                pct(m.accuracy),
                m.failed.len()
            )
        };
        let tail = format!(
            "{:>10} {:>10} {:>8} {:>10} {:>8} {:>6}",
            "Initial", "DDx", "DDx Len", "Final", "Acc", "Failed"
        );
        match self.axis {
            AblationAxis::EvidenceSources => {
                let _ = writeln!(out, "{:<13} {:<13} {tail}", "Further Look", "Further Test");
                for row in &self.rows {
                    if let GridCell::Sources {
                        further_look,
                        further_test,
                    } = row.cell
                    {
                        let mark = |b: bool| if b { "yes" } else { "no" };
                        let _ = writeln!(
                            out,
                            "{:<13} {:<13} {}",
                            mark(further_look),
                            mark(further_test),
                            metrics(&row.metrics)
                        );
                    }
                }
            }
            _ => {
                let _ = writeln!(out, "{:<32} {tail}", "Setting");
                for row in &self.rows {
                    let _ = writeln!(out, "{:<32} {}", row.label, metrics(&row.metrics));
                }
            }
        }
        out
    }
}
