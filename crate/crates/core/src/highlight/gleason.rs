use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{HighlightError, Result, SimilarityMatrix, Toolkit};

/// Category tags a Gleason toolkit must provide.
pub const GLEASON_CATEGORIES: [&str; 5] = ["G3", "G4", "G5", "Normal", "Stroma"];
const TUMOR_PATTERNS: [(u8, &str); 3] = [(3, "G3"), (4, "G4"), (5, "G5")];
/// Minimum share of tumor area for a secondary pattern.
pub const SECONDARY_MIN_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GleasonCall {
    pub primary: u8,
    pub secondary: u8,
}

impl GleasonCall {
    pub fn score(&self) -> String {
        format!("{}+{}", self.primary, self.secondary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GleasonMap {
    pub counts: BTreeMap<String, usize>,
    pub areas: BTreeMap<String, f64>,
    pub call: GleasonCall,
    /// Winning category per patch.
    pub labels: Vec<String>,
}

/// Primary is the largest tumor pattern; secondary is the next largest whose
/// count reaches max(5% of tumor patches, 1), otherwise the primary again.
/// Equal counts resolve to the lower pattern.
pub fn decide_gleason(counts: &BTreeMap<String, usize>) -> Result<GleasonCall> {
    let mut tumor: Vec<(u8, usize)> = TUMOR_PATTERNS
        .iter()
        .map(|&(g, tag)| (g, counts.get(tag).copied().unwrap_or(0)))
        .collect();
    let total: usize = tumor.iter().map(|t| t.1).sum();
    if total == 0 {
        return Err(HighlightError::NoTumor);
    }
    tumor.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let primary = tumor[0].0;
    let threshold = (SECONDARY_MIN_SHARE * total as f64).max(1.0);
    let secondary = match tumor.get(1) {
        Some(&(g, n)) if n > 0 && n as f64 >= threshold => g,
        _ => primary,
    };
    Ok(GleasonCall { primary, secondary })
}

/// Assign patches by argmax over every prototype (sub-prototypes included),
/// count per category and decide the Gleason pair.
pub fn gleason_area_map(
    s: &SimilarityMatrix,
    toolkit: &Toolkit,
    area_per_patch: f64,
) -> Result<GleasonMap> {
    for tag in GLEASON_CATEGORIES {
        if !toolkit.prototypes.iter().any(|p| p.category == tag) {
            return Err(HighlightError::Config(format!(
                "toolkit {} lacks a {tag} prototype",
                toolkit.name
            )));
        }
    }
    if s.cols() != toolkit.prototypes.len() {
        return Err(HighlightError::Dimension {
            expected: toolkit.prototypes.len(),
            found: s.cols(),
        });
    }
    let mut counts: BTreeMap<String, usize> = GLEASON_CATEGORIES
        .iter()
        .map(|c| (c.to_string(), 0))
        .collect();
    let mut labels = Vec::with_capacity(s.rows());
    for n in 0..s.rows() {
        let row = s.row(n);
        let mut best = 0;
        for t in 1..row.len() {
            if row[t] > row[best] {
                best = t;
            }
        }
        let category = toolkit.prototypes[best].category.clone();
        *counts.entry(category.clone()).or_default() += 1;
        labels.push(category);
    }
    let call = decide_gleason(&counts)?;
    let areas = counts
        .iter()
        .map(|(c, &n)| (c.clone(), n as f64 * area_per_patch))
        .collect();
    Ok(GleasonMap {
        counts,
        areas,
        call,
        labels,
    })
}
