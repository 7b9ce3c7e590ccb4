use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_augment, KMeansConfig};
use super::{HighlightError, Result};
use crate::store::{self, image_id, CorpusHandle, Level};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub description: String,
    pub level: Level,
    #[serde(skip)]
    pub vector: Vec<f32>,
    pub support_ids: Vec<String>,
    pub category: String,
    /// Index of the k-means sub-prototype this vector represents, `None` for
    /// the plain mean over the whole support set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PrototypeOptions {
    /// L2-normalize each support embedding before averaging.
    pub normalize_support: bool,
}

/// Mean of the support embeddings. The result is left unnormalized.
pub fn build_prototype<V: AsRef<[f32]>>(
    refs: &[V],
    support_ids: Vec<String>,
    description: &str,
    level: Level,
    category: &str,
    opts: PrototypeOptions,
) -> Result<Prototype> {
    let first = refs
        .first()
        .ok_or_else(|| HighlightError::EmptySupport(description.to_string()))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0f64; dim];
    for r in refs {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(HighlightError::Dimension {
                expected: dim,
                found: r.len(),
            });
        }
        let scale = if opts.normalize_support {
            let n = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(HighlightError::ZeroNorm(format!("support of {description}")));
            }
            1.0 / n
        } else {
            1.0
        };
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += f64::from(v) * scale;
        }
    }
    let m = refs.len() as f64;
    let support_ids = if support_ids.is_empty() {
        (0..refs.len()).map(|i| format!("{description}#{i}")).collect()
    } else {
        support_ids
    };
    Ok(Prototype {
        description: description.to_string(),
        level,
        vector: acc.into_iter().map(|a| (a / m) as f32).collect(),
        support_ids,
        category: category.to_string(),
        cluster: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolkitMode {
    Grounding,
    Localization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Toolkit {
    pub name: String,
    pub prototypes: Vec<Prototype>,
    pub highlight_set: BTreeSet<String>,
    pub mode: ToolkitMode,
}

impl Toolkit {
    pub fn new(
        name: impl Into<String>,
        prototypes: Vec<Prototype>,
        highlight: impl IntoIterator<Item = impl Into<String>>,
        mode: ToolkitMode,
    ) -> Result<Self> {
        let tk = Self {
            name: name.into(),
            prototypes,
            highlight_set: highlight.into_iter().map(Into::into).collect(),
            mode,
        };
        tk.validate()?;
        Ok(tk)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.prototypes.first() {
            let dim = first.vector.len();
            for p in &self.prototypes {
                if p.vector.len() != dim {
                    return Err(HighlightError::Dimension {
                        expected: dim,
                        found: p.vector.len(),
                    });
                }
                if p.support_ids.is_empty() {
                    return Err(HighlightError::EmptySupport(p.description.clone()));
                }
            }
        }
        let descriptions = self.descriptions();
        for h in &self.highlight_set {
            if !descriptions.iter().any(|d| d == h) {
                return Err(HighlightError::Config(format!(
                    "highlight description {h:?} is not in toolkit {}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.prototypes.first().map(|p| p.vector.len())
    }

    /// Distinct descriptions in prototype order.
    pub fn descriptions(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.prototypes
            .iter()
            .filter(|p| seen.insert(p.description.clone()))
            .map(|p| p.description.clone())
            .collect()
    }

    pub fn levels(&self) -> BTreeSet<Level> {
        self.prototypes.iter().map(|p| p.level).collect()
    }

    /// Sub-toolkit holding only the prototypes at `level`.
    pub fn at_level(&self, level: Level) -> Toolkit {
        let prototypes: Vec<_> = self
            .prototypes
            .iter()
            .filter(|p| p.level == level)
            .cloned()
            .collect();
        let present: BTreeSet<_> = prototypes.iter().map(|p| p.description.clone()).collect();
        Toolkit {
            name: self.name.clone(),
            highlight_set: self
                .highlight_set
                .iter()
                .filter(|h| present.contains(*h))
                .cloned()
                .collect(),
            prototypes,
            mode: self.mode,
        }
    }

    /// Sub-toolkit restricted to prototypes whose category is listed.
    pub fn with_categories(&self, categories: &[String]) -> Toolkit {
        let prototypes: Vec<_> = self
            .prototypes
            .iter()
            .filter(|p| categories.iter().any(|c| c == &p.category))
            .cloned()
            .collect();
        let present: BTreeSet<_> = prototypes.iter().map(|p| p.description.clone()).collect();
        Toolkit {
            name: self.name.clone(),
            highlight_set: self
                .highlight_set
                .iter()
                .filter(|h| present.contains(*h))
                .cloned()
                .collect(),
            prototypes,
            mode: self.mode,
        }
    }

    /// Columns whose description is highlighted.
    pub fn highlight_columns(&self) -> Vec<usize> {
        self.prototypes
            .iter()
            .enumerate()
            .filter(|(_, p)| self.highlight_set.contains(&p.description))
            .map(|(i, _)| i)
            .collect()
    }

    /// Support ids of every prototype with this description, base prototype first.
    pub fn reference_ids(&self, description: &str) -> Vec<String> {
        let mut out = Vec::new();
        for p in self
            .prototypes
            .iter()
            .filter(|p| p.description == description && p.cluster.is_none())
        {
            out.extend(p.support_ids.iter().cloned());
        }
        out
    }
}

/// How to find the support embeddings of one prototype inside a library corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub slide: String,
    /// Grid coordinates; all patches of the slide at the entry's level when absent.
    #[serde(default)]
    pub patches: Option<Vec<(i32, i32)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecipe {
    pub description: String,
    pub category: String,
    pub level: Level,
    pub support: SupportSpec,
    /// Add this many k-means sub-prototypes next to the mean prototype.
    #[serde(default)]
    pub kmeans_k: Option<usize>,
}

/// Declarative toolkit definition, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolkitRecipe {
    pub name: String,
    pub mode: ToolkitMode,
    pub highlight: Vec<String>,
    pub entries: Vec<EntryRecipe>,
    #[serde(default)]
    pub normalize_support: bool,
}

pub fn build_toolkit(recipe: &ToolkitRecipe, library: &CorpusHandle, seed: u64) -> Result<Toolkit> {
    let opts = PrototypeOptions {
        normalize_support: recipe.normalize_support,
    };
    let mut prototypes = Vec::new();
    for (n, entry) in recipe.entries.iter().enumerate() {
        let block = library.block(&entry.support.slide, entry.level)?;
        let rows: Vec<(i32, i32, &[f32])> = match &entry.support.patches {
            None => block.sorted_rows().collect(),
            Some(wanted) => {
                let all: Vec<_> = block.sorted_rows().collect();
                wanted
                    .iter()
                    .map(|&(x, y)| {
                        all.iter()
                            .find(|r| r.0 == x && r.1 == y)
                            .copied()
                            .ok_or_else(|| {
                                HighlightError::Store(store::StoreError::NotFound(image_id(
                                    &entry.support.slide,
                                    entry.level,
                                    x,
                                    y,
                                )))
                            })
                    })
                    .collect::<Result<_>>()?
            }
        };
        let ids: Vec<String> = rows
            .iter()
            .map(|r| image_id(&entry.support.slide, entry.level, r.0, r.1))
            .collect();
        let vectors: Vec<&[f32]> = rows.iter().map(|r| r.2).collect();
        prototypes.push(build_prototype(
            &vectors,
            ids.clone(),
            &entry.description,
            entry.level,
            &entry.category,
            opts,
        )?);
        if let Some(k) = entry.kmeans_k {
            let cfg = KMeansConfig {
                k,
                seed: seed.wrapping_add(n as u64),
                ..KMeansConfig::default()
            };
            let result = kmeans_augment(&vectors, &cfg)?;
            for (c, centroid) in result.centroids.into_iter().enumerate() {
                let members: Vec<String> = result
                    .assignment
                    .iter()
                    .zip(&ids)
                    .filter(|(a, _)| **a == c)
                    .map(|(_, id)| id.clone())
                    .collect();
                prototypes.push(Prototype {
                    description: entry.description.clone(),
                    level: entry.level,
                    vector: centroid,
                    support_ids: members,
                    category: entry.category.clone(),
                    cluster: Some(c),
                });
            }
        }
    }
    Toolkit::new(
        recipe.name.clone(),
        prototypes,
        recipe.highlight.clone(),
        recipe.mode,
    )
}

#[derive(Serialize, Deserialize)]
struct ToolkitFile {
    format_version: u32,
    name: String,
    mode: ToolkitMode,
    highlight: Vec<String>,
    dim: usize,
    prototypes: Vec<Prototype>,
}

/// Writes `<dir>/<name>.json` and the prototype vectors to `<dir>/<name>.emb`.
pub fn save_toolkit(toolkit: &Toolkit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dim = toolkit.dim().unwrap_or(0);
    let file = ToolkitFile {
        format_version: 1,
        name: toolkit.name.clone(),
        mode: toolkit.mode,
        highlight: toolkit.highlight_set.iter().cloned().collect(),
        dim,
        prototypes: toolkit.prototypes.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("toolkit serializes");
    fs::write(dir.join(format!("{}.json", toolkit.name)), text)?;
    let coords: Vec<(i32, i32)> = (0..toolkit.prototypes.len() as i32).map(|i| (i, 0)).collect();
    let data: Vec<f32> = toolkit
        .prototypes
        .iter()
        .flat_map(|p| p.vector.iter().copied())
        .collect();
    fs::write(
        dir.join(format!("{}.emb", toolkit.name)),
        store::encode_block(dim.max(1), &coords, &data),
    )?;
    Ok(())
}

pub fn load_toolkit(dir: &Path, name: &str) -> Result<Toolkit> {
    let json_path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json_path)?;
    let file: ToolkitFile = serde_json::from_str(&text)
        .map_err(|e| HighlightError::Format(format!("{}: {e}", json_path.display())))?;
    let emb_path = dir.join(format!("{name}.emb"));
    let bytes = fs::read(&emb_path)?;
    let raw = store::decode_block(&bytes, &emb_path.display().to_string())?;
    if raw.dim != file.dim || raw.coords.len() != file.prototypes.len() {
        return Err(HighlightError::Format(format!(
            "{}: vectors do not match {} prototypes of dim {}",
            emb_path.display(),
            file.prototypes.len(),
            file.dim
        )));
    }
    let mut prototypes = file.prototypes;
    for (i, p) in prototypes.iter_mut().enumerate() {
        p.vector = raw.data[i * raw.dim..(i + 1) * raw.dim].to_vec();
    }
    Toolkit::new(file.name, prototypes, file.highlight, file.mode)
}
