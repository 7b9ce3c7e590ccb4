use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HighlightError, Result, SimilarityMatrix, Toolkit, ToolkitMode};
use crate::store::{image_id, Level, PatchBlock};

/// Slide-level coordinates for the rows of a similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub slide_id: String,
    pub level: Level,
    pub coords: Vec<(i32, i32)>,
}

impl PatchGrid {
    pub fn from_block(slide_id: &str, level: Level, block: &PatchBlock) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            level,
            coords: block.sorted_coords(),
        }
    }

    /// Grid with synthetic coordinates `(n, 0)`, for matrices without a slide.
    pub fn indexed(slide_id: &str, level: Level, n: usize) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            level,
            coords: (0..n as i32).map(|i| (i, 0)).collect(),
        }
    }

    pub fn image_id(&self, n: usize) -> String {
        let (x, y) = self.coords[n];
        image_id(&self.slide_id, self.level, x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Topk,
    Random,
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    /// Row of the similarity matrix this entry came from.
    pub index: usize,
    pub image_id: String,
    pub level: Level,
    pub score: Option<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoiSelection {
    pub plan_name: String,
    pub entries: Vec<RoiEntry>,
    /// Fewer entries than requested were available.
    #[serde(default)]
    pub shortfall: bool,
}

impl RoiSelection {
    pub fn image_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    /// Append entries from `other`, skipping image ids already present.
    pub fn extend(&mut self, other: RoiSelection) {
        let mut seen: BTreeSet<String> = self.entries.iter().map(|e| e.image_id.clone()).collect();
        self.shortfall |= other.shortfall;
        for e in other.entries {
            if seen.insert(e.image_id.clone()) {
                self.entries.push(e);
            }
        }
    }
}

/// Score descending, then index ascending.
#[inline]
fn rank_order(a: &(usize, f32), b: &(usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` best scores under [`rank_order`], best first.
fn top_k(mut scored: Vec<(usize, f32)>, k: usize) -> Vec<(usize, f32)> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounding {
    /// Winning prototype column per patch.
    pub assignment: Vec<usize>,
    /// Patches whose description is highlighted, ascending.
    pub highlighted: Vec<usize>,
}

impl Grounding {
    pub fn description<'a>(&self, toolkit: &'a Toolkit, n: usize) -> &'a str {
        &toolkit.prototypes[self.assignment[n]].description
    }
}

/// Per-patch argmax over prototype columns; ties go to the lowest column.
pub fn ground_regions(s: &SimilarityMatrix, toolkit: &Toolkit) -> Result<Grounding> {
    if toolkit.mode != ToolkitMode::Grounding {
        return Err(HighlightError::Config(format!(
            "toolkit {} is not a grounding toolkit",
            toolkit.name
        )));
    }
    if toolkit.highlight_set.is_empty() {
        return Err(HighlightError::Config(format!(
            "toolkit {} has an empty highlight set",
            toolkit.name
        )));
    }
    if s.cols() != toolkit.prototypes.len() {
        return Err(HighlightError::Dimension {
            expected: toolkit.prototypes.len(),
            found: s.cols(),
        });
    }
    let highlight: Vec<bool> = toolkit
        .prototypes
        .iter()
        .map(|p| toolkit.highlight_set.contains(&p.description))
        .collect();
    let mut assignment = Vec::with_capacity(s.rows());
    let mut highlighted = Vec::new();
    for n in 0..s.rows() {
        let row = s.row(n);
        let mut best = 0;
        for t in 1..row.len() {
            if row[t] > row[best] {
                best = t;
            }
        }
        if highlight[best] {
            highlighted.push(n);
        }
        assignment.push(best);
    }
    Ok(Grounding {
        assignment,
        highlighted,
    })
}

/// Top `k_top` highlighted patches by their best highlighted similarity, then
/// `k_random` more drawn uniformly from the rest of the highlighted set.
pub fn select_rois_region<R: Rng + ?Sized>(
    highlighted: &[usize],
    s: &SimilarityMatrix,
    toolkit: &Toolkit,
    grid: &PatchGrid,
    k_top: usize,
    k_random: usize,
    rng: &mut R,
    plan_name: &str,
) -> Result<RoiSelection> {
    if highlighted.is_empty() {
        return Err(HighlightError::EmptyHighlight);
    }
    let cols = toolkit.highlight_columns();
    if cols.is_empty() {
        return Err(HighlightError::Config(format!(
            "toolkit {} has no highlighted prototype",
            toolkit.name
        )));
    }
    let scored: Vec<(usize, f32)> = highlighted
        .iter()
        .map(|&n| {
            let score = cols
                .iter()
                .map(|&t| s.get(n, t))
                .fold(f32::NEG_INFINITY, f32::max);
            (n, score)
        })
        .collect();
    let shortfall = highlighted.len() < k_top + k_random;
    let top = top_k(scored, k_top);
    let chosen: BTreeSet<usize> = top.iter().map(|&(n, _)| n).collect();
    let mut entries: Vec<RoiEntry> = top
        .into_iter()
        .map(|(n, score)| RoiEntry {
            index: n,
            image_id: grid.image_id(n),
            level: grid.level,
            score: Some(score),
            provenance: Provenance::Topk,
        })
        .collect();
    let rest: Vec<usize> = highlighted
        .iter()
        .copied()
        .filter(|n| !chosen.contains(n))
        .collect();
    let draw = k_random.min(rest.len());
    if draw > 0 {
        for i in sample(rng, rest.len(), draw).iter() {
            let n = rest[i];
            entries.push(RoiEntry {
                index: n,
                image_id: grid.image_id(n),
                level: grid.level,
                score: None,
                provenance: Provenance::Random,
            });
        }
    }
    Ok(RoiSelection {
        plan_name: plan_name.to_string(),
        entries,
        shortfall,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localized {
    pub description: String,
    pub selection: RoiSelection,
}

/// For every description, the `k` patches most similar to its mean prototype.
/// When a description has several mean prototypes the column maximum is used.
pub fn localize_entities(
    s: &SimilarityMatrix,
    toolkit: &Toolkit,
    grid: &PatchGrid,
    k: usize,
    plan_name: &str,
) -> Result<Vec<Localized>> {
    if toolkit.mode != ToolkitMode::Localization {
        return Err(HighlightError::Config(format!(
            "toolkit {} is not a localization toolkit",
            toolkit.name
        )));
    }
    if k == 0 {
        return Err(HighlightError::Config("k must be at least 1".into()));
    }
    let mut out = Vec::new();
    for description in toolkit.descriptions() {
        let cols: Vec<usize> = toolkit
            .prototypes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.description == description && p.cluster.is_none())
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            continue;
        }
        let scored: Vec<(usize, f32)> = (0..s.rows())
            .map(|n| {
                let score = cols
                    .iter()
                    .map(|&t| s.get(n, t))
                    .fold(f32::NEG_INFINITY, f32::max);
                (n, score)
            })
            .collect();
        let entries = top_k(scored, k)
            .into_iter()
            .map(|(n, score)| RoiEntry {
                index: n,
                image_id: grid.image_id(n),
                level: grid.level,
                score: Some(score),
                provenance: Provenance::Topk,
            })
            .collect();
        out.push(Localized {
            description,
            selection: RoiSelection {
                plan_name: plan_name.to_string(),
                entries,
                shortfall: k > s.rows(),
            },
        });
    }
    Ok(out)
}

/// Up to `count` patches matched to the k-means sub-prototypes of
/// `description`, visiting sub-prototypes round-robin and skipping patches in
/// `exclude`.
pub fn kmeans_rois(
    s: &SimilarityMatrix,
    toolkit: &Toolkit,
    grid: &PatchGrid,
    description: &str,
    count: usize,
    exclude: &BTreeSet<usize>,
) -> Vec<RoiEntry> {
    let cols: Vec<usize> = toolkit
        .prototypes
        .iter()
        .enumerate()
        .filter(|(_, p)| p.description == description && p.cluster.is_some())
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() || count == 0 {
        return Vec::new();
    }
    let ranked: Vec<Vec<(usize, f32)>> = cols
        .iter()
        .map(|&t| {
            let scored = (0..s.rows()).map(|n| (n, s.get(n, t))).collect();
            top_k(scored, count + exclude.len())
        })
        .collect();
    let mut taken = exclude.clone();
    let mut cursors = vec![0usize; cols.len()];
    let mut out = Vec::new();
    let mut stalled = 0;
    let mut c = 0;
    while out.len() < count && stalled < cols.len() {
        let list = &ranked[c];
        while cursors[c] < list.len() && taken.contains(&list[cursors[c]].0) {
            cursors[c] += 1;
        }
        if let Some(&(n, score)) = list.get(cursors[c]) {
            taken.insert(n);
            out.push(RoiEntry {
                index: n,
                image_id: grid.image_id(n),
                level: grid.level,
                score: Some(score),
                provenance: Provenance::Kmeans,
            });
            stalled = 0;
        } else {
            stalled += 1;
        }
        c = (c + 1) % cols.len();
    }
    out
}
