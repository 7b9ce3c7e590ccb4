//! Synthetic embedding worlds.
//!
//! Each morphological concept is a random unit direction; a patch embedding
//! is a weighted sum of concept directions plus isotropic Gaussian noise.
//! Library slides (`lib-*`) supply toolkit support sets, case slides mix
//! tissues in given proportions. Everything is a pure function of the seed.

mod sim;

pub use sim::{SimConfig, SimulatedBackend};

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eval::{CaseFixture, GradeTruth, Protocol};
use crate::highlight::{
    build_toolkit, save_toolkit, EntryRecipe, HighlightError, Result as HighlightResult, SupportSpec, Toolkit,
    ToolkitMode, ToolkitRecipe,
};
use crate::store::{CorpusHandle, Level, LevelEntry, PatchBlock, SlideManifest};

pub const DEFAULT_DIM: usize = 32;

/// Concepts that make up non-lesional tissue.
pub const BACKGROUND: [&str; 7] = [
    "normal-kidney",
    "normal-gastric",
    "normal-prostate",
    "stroma",
    "lymphoid",
    "vessel",
    "nerve",
];

/// Concepts the screening interpreter can name as a lesion.
pub const LESIONS: [&str; 8] = [
    "ccRCC",
    "chRCC",
    "pRCC",
    "gastric-adenocarcinoma",
    "thymic-carcinoma",
    "gleason-3",
    "gleason-4",
    "gleason-5",
];

pub const GRADES: [&str; 4] = ["G1", "G2", "G3", "G4"];

const OTHER: [&str; 3] = ["tumor", "vessel-invasion", "nerve-invasion"];

pub const RCC_SUBTYPES: [&str; 3] = ["ccRCC", "chRCC", "pRCC"];

/// Full diagnosis name for a lesion concept.
pub fn diagnosis_name(concept: &str) -> Option<&'static str> {
    Some(match concept {
        "ccRCC" => "Clear cell renal cell carcinoma (ccRCC)",
        "chRCC" => "Chromophobe renal cell carcinoma (chRCC)",
        "pRCC" => "Papillary renal cell carcinoma (pRCC)",
        "gastric-adenocarcinoma" => "Gastric adenocarcinoma",
        "thymic-carcinoma" => "Thymic carcinoma",
        "gleason-3" | "gleason-4" | "gleason-5" => "Prostate adenocarcinoma",
        _ => return None,
    })
}

/// Marker panel used for renal tumours in synthetic cases.
pub const RCC_PANEL: [&str; 4] = ["CA9", "CK7", "CD117", "AMACR"];

/// Expected staining of [`RCC_PANEL`] per subtype.
pub fn rcc_profile(subtype: &str) -> Option<[&'static str; 4]> {
    Some(match subtype {
        "ccRCC" => ["positive", "negative", "negative", "negative"],
        "chRCC" => ["negative", "positive", "positive", "negative"],
        "pRCC" => ["negative", "positive", "negative", "positive"],
        _ => return None,
    })
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

/// Unit concept directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    pub dim: usize,
    pub seed: u64,
    vectors: BTreeMap<String, Vec<f32>>,
}

impl ConceptBank {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = BTreeMap::new();
        let names = BACKGROUND
            .iter()
            .chain(&LESIONS)
            .chain(&GRADES)
            .chain(&OTHER);
        for name in names {
            let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            vectors.insert((*name).to_string(), v);
        }
        Self { dim, seed, vectors }
    }

    pub fn vector(&self, name: &str) -> Option<&[f32]> {
        self.vectors.get(name).map(Vec::as_slice)
    }

    /// Concept among `among` with the highest cosine to `embedding`.
    pub fn nearest<'a>(&self, embedding: &[f32], among: &[&'a str]) -> Option<&'a str> {
        let norm = embedding.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm == 0.0 {
            return None;
        }
        among
            .iter()
            .filter_map(|&c| {
                let v = self.vector(c)?;
                let s: f32 = v.iter().zip(embedding).map(|(a, b)| a * b).sum();
                Some((c, s))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
    }

    /// Weighted concept sum plus Gaussian noise of expected norm `noise`.
    pub fn sample(&self, tissue: &Tissue, noise: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut out = vec![0f32; self.dim];
        for (name, w) in &tissue.parts {
            let v = self
                .vector(name)
                .unwrap_or_else(|| panic!("unknown concept {name}"));
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        let scale = noise / (self.dim as f32).sqrt();
        for o in &mut out {
            let z: f32 = StandardNormal.sample(rng);
            *o += scale * z;
        }
        out
    }
}

/// A weighted mix of concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub parts: Vec<(String, f32)>,
}

impl Tissue {
    pub fn of(parts: &[(&str, f32)]) -> Self {
        Self {
            parts: parts.iter().map(|(n, w)| ((*n).to_string(), *w)).collect(),
        }
    }

    pub fn plain(concept: &str) -> Self {
        Self::of(&[(concept, 1.0)])
    }

    pub fn rcc(subtype: &str, grade: u8) -> Self {
        let g = format!("G{grade}");
        Self::of(&[("tumor", 0.8), (subtype, 1.0), (g.as_str(), 0.7)])
    }

    pub fn gleason(pattern: u8) -> Self {
        let p = format!("gleason-{pattern}");
        Self::of(&[("tumor", 0.8), ("normal-prostate", 0.3), (p.as_str(), 1.0)])
    }

    pub fn invaded(structure: &str) -> Self {
        let inv = format!("{structure}-invasion");
        Self::of(&[(structure, 0.8), (inv.as_str(), 1.0), ("tumor", 0.5)])
    }

    pub fn carcinoma(concept: &str) -> Self {
        Self::of(&[("tumor", 0.8), (concept, 1.0)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub tissue: Tissue,
    /// Fraction of the slide's patches; shares are renormalized.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSpec {
    pub slide_id: String,
    /// Grid width and height at 20x; coarser levels halve per step.
    pub grid: (u32, u32),
    pub levels: Vec<Level>,
    pub regions: Vec<Region>,
    pub noise: f32,
}

fn level_scale(level: Level) -> u32 {
    match level {
        Level::X20 => 1,
        Level::X10 => 2,
        Level::X5 => 4,
    }
}

/// Largest-remainder apportionment of `n` patches; every positive share
/// gets at least one patch when `n` allows.
fn apportion(shares: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(shares.len() * 2) {
        if left == 0 {
            break;
        }
        if shares[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..shares.len() {
        if shares[i] > 0.0 && counts[i] == 0 {
            if let Some(j) = (0..shares.len()).max_by_key(|&j| counts[j]).filter(|&j| counts[j] > 1) {
                counts[j] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Patch blocks of one synthetic slide plus the region index of every row
/// (in block row order).
pub fn generate_slide(
    bank: &ConceptBank,
    spec: &SlideSpec,
    seed: u64,
) -> (SlideManifest, Vec<(Level, PatchBlock, Vec<usize>)>) {
    let mut levels = Vec::new();
    let shares: Vec<f64> = spec.regions.iter().map(|r| r.share).collect();
    for &level in &spec.levels {
        let s = level_scale(level);
        let w = (spec.grid.0 / s).max(2);
        let h = (spec.grid.1 / s).max(2);
        let n = (w * h) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ stable_hash(&[&spec.slide_id, level.tag()]),
        );
        let mut labels: Vec<usize> = apportion(&shares, n)
            .into_iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat_n(i, c))
            .collect();
        labels.shuffle(&mut rng);
        let mut coords = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * bank.dim);
        for (i, &label) in labels.iter().enumerate() {
            coords.push(((i as u32 % w) as i32, (i as u32 / w) as i32));
            data.extend(bank.sample(&spec.regions[label].tissue, spec.noise, &mut rng));
        }
        let block = PatchBlock::new(bank.dim, coords, data).expect("grid coordinates are unique");
        levels.push((level, block, labels));
    }
    let manifest = SlideManifest {
        slide_id: spec.slide_id.clone(),
        levels: levels
            .iter()
            .map(|(l, b, _)| {
                (
                    *l,
                    LevelEntry {
                        count: b.len(),
                        pitch_px: 256 * level_scale(*l),
                    },
                )
            })
            .collect(),
        provenance: "synthetic".into(),
    };
    (manifest, levels)
}

fn library_slide(name: &str, regions: Vec<Region>) -> SlideSpec {
    SlideSpec {
        slide_id: format!("lib-{name}"),
        grid: (12, 12),
        levels: Level::ALL.to_vec(),
        regions,
        noise: 0.35,
    }
}

fn even(tissues: Vec<Tissue>) -> Vec<Region> {
    tissues
        .into_iter()
        .map(|tissue| Region { tissue, share: 1.0 })
        .collect()
}

/// Library slides backing [`default_recipes`].
pub fn library_slides() -> Vec<SlideSpec> {
    let mut out = vec![
        library_slide(
            "tumor",
            even(vec![
                Tissue::rcc("ccRCC", 2),
                Tissue::rcc("chRCC", 2),
                Tissue::rcc("pRCC", 3),
                Tissue::carcinoma("gastric-adenocarcinoma"),
                Tissue::carcinoma("thymic-carcinoma"),
                Tissue::gleason(4),
            ]),
        ),
        library_slide(
            "normal",
            even(vec![
                Tissue::plain("normal-kidney"),
                Tissue::plain("normal-gastric"),
                Tissue::plain("normal-prostate"),
            ]),
        ),
    ];
    for c in ["stroma", "lymphoid", "vessel", "nerve", "normal-prostate"] {
        out.push(library_slide(c, even(vec![Tissue::plain(c)])));
    }
    for s in RCC_SUBTYPES {
        out.push(library_slide(s, even((1..=4).map(|g| Tissue::rcc(s, g)).collect())));
    }
    for g in 1..=4u8 {
        out.push(library_slide(
            &format!("G{g}"),
            even(RCC_SUBTYPES.iter().map(|s| Tissue::rcc(s, g)).collect()),
        ));
    }
    for p in 3..=5u8 {
        out.push(library_slide(&format!("gleason-{p}"), even(vec![Tissue::gleason(p)])));
    }
    for s in ["vessel", "nerve"] {
        out.push(library_slide(&format!("{s}-invasion"), even(vec![Tissue::invaded(s)])));
    }
    out
}

/// One toolkit entry: description, category, library slide and the concept
/// the description stands for.
struct Entry {
    description: &'static str,
    category: &'static str,
    library: &'static str,
    concept: &'static str,
}

const fn entry(
    description: &'static str,
    category: &'static str,
    library: &'static str,
    concept: &'static str,
) -> Entry {
    Entry {
        description,
        category,
        library,
        concept,
    }
}

struct Kit {
    name: &'static str,
    mode: ToolkitMode,
    levels: &'static [Level],
    kmeans: Option<usize>,
    entries: &'static [Entry],
    highlight: &'static [&'static str],
}

const KITS: &[Kit] = &[
    Kit {
        name: "pan-cancer",
        mode: ToolkitMode::Grounding,
        levels: &[Level::X10, Level::X20],
        kmeans: None,
        entries: &[
            entry("Malignant tumor cells", "tumor", "lib-tumor", "tumor"),
            entry("Normal parenchyma", "normal", "lib-normal", "normal-kidney"),
            entry("Fibrous stroma", "stroma", "lib-stroma", "stroma"),
            entry("Lymphoid infiltrate", "lymphoid", "lib-lymphoid", "lymphoid"),
        ],
        highlight: &["Malignant tumor cells"],
    },
    Kit {
        name: "rcc-subtype",
        mode: ToolkitMode::Localization,
        levels: &[Level::X10],
        kmeans: Some(4),
        entries: &[
            entry("Clear cell renal carcinoma cells", "ccRCC", "lib-ccRCC", "ccRCC"),
            entry("Chromophobe renal carcinoma cells", "chRCC", "lib-chRCC", "chRCC"),
            entry("Papillary renal carcinoma cells", "pRCC", "lib-pRCC", "pRCC"),
        ],
        highlight: &[],
    },
    Kit {
        name: "nuclear-grade",
        mode: ToolkitMode::Localization,
        levels: &[Level::X20],
        kmeans: None,
        entries: &[
            entry("Tumor cells with nuclear grade 1", "G1", "lib-G1", "G1"),
            entry("Tumor cells with nuclear grade 2", "G2", "lib-G2", "G2"),
            entry("Tumor cells with nuclear grade 3", "G3", "lib-G3", "G3"),
            entry("Tumor cells with nuclear grade 4", "G4", "lib-G4", "G4"),
        ],
        highlight: &[],
    },
    Kit {
        name: "gleason",
        mode: ToolkitMode::Grounding,
        levels: &[Level::X20],
        kmeans: Some(2),
        entries: &[
            entry("Gleason pattern 3 glands", "G3", "lib-gleason-3", "gleason-3"),
            entry("Gleason pattern 4 glands", "G4", "lib-gleason-4", "gleason-4"),
            entry("Gleason pattern 5 tumor", "G5", "lib-gleason-5", "gleason-5"),
            entry("Benign prostate glands", "Normal", "lib-normal-prostate", "normal-prostate"),
            entry("Prostatic stroma", "Stroma", "lib-stroma", "stroma"),
        ],
        highlight: &[
            "Gleason pattern 3 glands",
            "Gleason pattern 4 glands",
            "Gleason pattern 5 tumor",
        ],
    },
    Kit {
        name: "invasion",
        mode: ToolkitMode::Localization,
        levels: &[Level::X5, Level::X10, Level::X20],
        kmeans: None,
        entries: &[
            entry("Vessel with tumor invasion", "vessel-invasion", "lib-vessel-invasion", "vessel-invasion"),
            entry("Vessel without invasion", "vessel", "lib-vessel", "vessel"),
            entry("Nerve with tumor invasion", "nerve-invasion", "lib-nerve-invasion", "nerve-invasion"),
            entry("Nerve without invasion", "nerve", "lib-nerve", "nerve"),
        ],
        highlight: &[],
    },
];

/// Toolkit recipes over [`library_slides`] for every registered tool and
/// the pan-cancer screen.
pub fn default_recipes() -> Vec<ToolkitRecipe> {
    KITS.iter()
        .map(|kit| ToolkitRecipe {
            name: kit.name.into(),
            mode: kit.mode,
            highlight: if kit.highlight.is_empty() {
                kit.entries.iter().map(|e| e.description.to_string()).collect()
            } else {
                kit.highlight.iter().map(|h| h.to_string()).collect()
            },
            entries: kit
                .levels
                .iter()
                .flat_map(|&level| {
                    kit.entries.iter().map(move |e| EntryRecipe {
                        description: e.description.into(),
                        category: e.category.into(),
                        level,
                        support: SupportSpec {
                            slide: e.library.into(),
                            patches: None,
                        },
                        kmeans_k: kit.kmeans,
                    })
                })
                .collect(),
            normalize_support: true,
        })
        .collect()
}

/// Concept behind a toolkit description, and the concepts of its sibling
/// descriptions in the same toolkit.
pub fn description_concept(description: &str) -> Option<(&'static str, Vec<&'static str>)> {
    KITS.iter().find_map(|kit| {
        let e = kit.entries.iter().find(|e| e.description == description)?;
        Some((e.concept, kit.entries.iter().map(|e| e.concept).collect()))
    })
}

/// Ground truth of a synthetic case, as the simulated oracle sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTruth {
    pub diagnosis: String,
    #[serde(default)]
    pub grade: Option<GradeTruth>,
    #[serde(default)]
    pub invasion: Option<bool>,
    /// Marker name to result text.
    pub exams: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub case_id: String,
    pub case_info: String,
    pub slide: SlideSpec,
    pub truth: CaseTruth,
}

impl SyntheticCase {
    pub fn fixture(&self, protocol: Protocol) -> CaseFixture {
        CaseFixture {
            case_id: self.case_id.clone(),
            case_info: self.case_info.clone(),
            slide_id: Some(self.slide.slide_id.clone()),
            truth: self.truth.diagnosis.clone(),
            grade: self.truth.grade.clone(),
            invasion: self.truth.invasion,
            script: None,
            protocol,
        }
    }
}

/// `n` renal cases cycling through the three subtypes. Every third slide
/// carries a look-alike region of another subtype.
pub fn rcc_cases(n: usize, seed: u64) -> Vec<SyntheticCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let subtype = RCC_SUBTYPES[i % 3];
            let grade = [2u8, 3, 1, 4, 2, 3][(i + i / 3) % 6];
            let decoy = RCC_SUBTYPES[(i + 1 + usize::from(rng_bool(&mut rng))) % 3];
            let mut regions = vec![
                Region {
                    tissue: Tissue::rcc(subtype, grade),
                    share: 0.5,
                },
                Region {
                    tissue: Tissue::plain("normal-kidney"),
                    share: 0.3,
                },
                Region {
                    tissue: Tissue::plain("stroma"),
                    share: 0.2,
                },
            ];
            if i % 3 == 2 {
                regions[0].share = 0.3;
                regions.push(Region {
                    tissue: Tissue::rcc(decoy, grade),
                    share: 0.25,
                });
            }
            let case_id = format!("RCC-{:02}", i + 1);
            let side = if i % 2 == 0 { "left" } else { "right" };
            let size = 2.0 + (i as f64 * 0.7) % 6.0;
            let profile = rcc_profile(subtype).expect("known subtype");
            let mut exams: BTreeMap<String, String> = RCC_PANEL
                .iter()
                .zip(profile)
                .map(|(m, r)| ((*m).to_string(), r.to_string()))
                .collect();
            exams.insert("PAX8".into(), "positive".into());
            SyntheticCase {
                case_info: format!(
                    "Case {case_id}: The slide is from the {side} kidney, with a tumor of {size:.1} cm."
                ),
                slide: SlideSpec {
                    slide_id: format!("syn-{case_id}"),
                    grid: (16, 16),
                    levels: Level::ALL.to_vec(),
                    regions,
                    noise: 0.45 + 0.05 * (i % 4) as f32,
                },
                truth: CaseTruth {
                    diagnosis: diagnosis_name(subtype).expect("known subtype").into(),
                    grade: Some(GradeTruth::Nuclear { grade }),
                    invasion: None,
                    exams,
                },
                case_id,
            }
        })
        .collect()
}

fn rng_bool(rng: &mut ChaCha8Rng) -> bool {
    use rand::Rng;
    rng.random_bool(0.5)
}

/// Slides standing in for the three worked cases.
pub fn worked_case_slides() -> Vec<SlideSpec> {
    let slide = |id: &str, regions: Vec<(Tissue, f64)>| SlideSpec {
        slide_id: id.into(),
        grid: (16, 16),
        levels: Level::ALL.to_vec(),
        regions: regions
            .into_iter()
            .map(|(tissue, share)| Region { tissue, share })
            .collect(),
        noise: 0.4,
    };
    vec![
        slide(
            "TCGA-B0-4824",
            vec![
                (Tissue::rcc("ccRCC", 3), 0.6),
                (Tissue::plain("normal-kidney"), 0.25),
                (Tissue::plain("stroma"), 0.15),
            ],
        ),
        slide(
            "TCGA-VQ-A91K",
            vec![
                (Tissue::carcinoma("gastric-adenocarcinoma"), 0.45),
                (Tissue::plain("normal-gastric"), 0.2),
                (Tissue::plain("stroma"), 0.15),
                (Tissue::invaded("vessel"), 0.08),
                (Tissue::plain("vessel"), 0.06),
                (Tissue::plain("nerve"), 0.06),
            ],
        ),
        slide(
            "PO-479",
            vec![
                (Tissue::carcinoma("thymic-carcinoma"), 0.7),
                (Tissue::plain("lymphoid"), 0.2),
                (Tissue::plain("stroma"), 0.1),
            ],
        ),
    ]
}

/// A corpus holding the library and the given case slides, with toolkits
/// built from [`default_recipes`].
#[derive(Debug, Clone)]
pub struct World {
    pub bank: ConceptBank,
    pub corpus: CorpusHandle,
    pub toolkits: Vec<Toolkit>,
    /// Region index per row of each (slide, level) block, in block row order.
    pub labels: BTreeMap<(String, Level), Vec<usize>>,
}

pub fn build_world(
    dim: usize,
    seed: u64,
    slides: &[SlideSpec],
) -> HighlightResult<World> {
    let bank = ConceptBank::new(dim, seed);
    let mut parts = Vec::new();
    let mut labels = BTreeMap::new();
    for spec in library_slides().iter().chain(slides) {
        let (manifest, levels) = generate_slide(&bank, spec, seed);
        let mut blocks = Vec::new();
        for (level, block, l) in levels {
            labels.insert((spec.slide_id.clone(), level), l);
            blocks.push((level, block));
        }
        parts.push((manifest, blocks));
    }
    let corpus = CorpusHandle::from_blocks(dim, parts).map_err(HighlightError::from)?;
    let toolkits = default_recipes()
        .iter()
        .map(|r| build_toolkit(r, &corpus, seed))
        .collect::<HighlightResult<Vec<_>>>()?;
    Ok(World {
        bank,
        corpus,
        toolkits,
        labels,
    })
}

/// `n` renal cases served in memory by the simulated backend: the default
/// bench for ablations when no fixture corpus is given.
pub fn synthetic_bench(
    n: usize,
    dim: usize,
    seed: u64,
) -> HighlightResult<(crate::protocol::EngineContext, Vec<CaseFixture>)> {
    let cases = rcc_cases(n, seed);
    let slides: Vec<SlideSpec> = cases.iter().map(|c| c.slide.clone()).collect();
    let world = build_world(dim, seed, &slides)?;
    let corpus = Arc::new(world.corpus);
    let sim = SimulatedBackend::new(
        corpus.clone(),
        world.bank,
        cases.iter().map(|c| (c.case_info.clone(), c.truth.clone())),
        SimConfig {
            seed,
            ..SimConfig::default()
        },
    );
    let ctx = crate::protocol::EngineContext::new(crate::backends::Backends::shared(Arc::new(sim)))
        .with_corpus(corpus)
        .with_toolkits(world.toolkits);
    Ok((ctx, cases.iter().map(|c| c.fixture(Protocol::Es)).collect()))
}

pub const WORLD_FILE: &str = "world.json";

/// Everything needed to rebuild the simulated backend next to a written
/// corpus: the concept bank is a function of `dim` and `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub format_version: u32,
    pub dim: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub cases: Vec<(String, CaseTruth)>,
}

impl WorldFile {
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::other(format!("{}: {e}", path.display())))
    }

    pub fn backend(&self, corpus: Arc<CorpusHandle>) -> SimulatedBackend {
        SimulatedBackend::new(
            corpus,
            ConceptBank::new(self.dim, self.seed),
            self.cases.iter().cloned(),
            SimConfig {
                seed: self.seed,
                ..self.sim
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub out: PathBuf,
    pub slides: usize,
    pub patches: usize,
    pub toolkits: Vec<String>,
    pub cases: Vec<String>,
}

/// Write `<out>/corpus`, `<out>/toolkits`, `<out>/cases/*.json` and
/// `<out>/world.json` for `n` renal cases.
pub fn write_synthetic(out: &Path, n: usize, dim: usize, seed: u64) -> HighlightResult<SynthSummary> {
    let cases = rcc_cases(n, seed);
    let slides: Vec<SlideSpec> = cases.iter().map(|c| c.slide.clone()).collect();
    let world = build_world(dim, seed, &slides)?;
    crate::store::write_corpus(&world.corpus, out.join("corpus")).map_err(HighlightError::from)?;
    let kit_dir = out.join("toolkits");
    for kit in &world.toolkits {
        save_toolkit(kit, &kit_dir)?;
    }
    let case_dir = out.join("cases");
    fs::create_dir_all(&case_dir)?;
    for c in &cases {
        let text = serde_json::to_string_pretty(&c.fixture(Protocol::Es)).expect("fixture serializes");
        fs::write(case_dir.join(format!("{}.json", c.case_id)), text)?;
    }
    let file = WorldFile {
        format_version: 1,
        dim,
        seed,
        sim: SimConfig::default(),
        cases: cases.iter().map(|c| (c.case_info.clone(), c.truth.clone())).collect(),
    };
    fs::write(
        out.join(WORLD_FILE),
        serde_json::to_string_pretty(&file).expect("world serializes"),
    )?;
    Ok(SynthSummary {
        out: out.to_path_buf(),
        slides: world.corpus.manifest().slides.len(),
        patches: world.corpus.total_records(),
        toolkits: world.toolkits.iter().map(|t| t.name.clone()).collect(),
        cases: cases.iter().map(|c| c.case_id.clone()).collect(),
    })
}

const WORKED_FILES: [(&str, &str); 6] = [
    ("cases/case1.json", include_str!("../../fixtures/worked/cases/case1.json")),
    ("cases/case2.json", include_str!("../../fixtures/worked/cases/case2.json")),
    ("cases/case3.json", include_str!("../../fixtures/worked/cases/case3.json")),
    ("scripts/case1.json", include_str!("../../fixtures/worked/scripts/case1.json")),
    ("scripts/case2.json", include_str!("../../fixtures/worked/scripts/case2.json")),
    ("scripts/case3.json", include_str!("../../fixtures/worked/scripts/case3.json")),
];

/// Write the three worked cases with their backend scripts, next to a
/// corpus and toolkits holding slides that stand in for theirs.
pub fn write_worked(out: &Path, dim: usize, seed: u64) -> HighlightResult<SynthSummary> {
    let world = build_world(dim, seed, &worked_case_slides())?;
    crate::store::write_corpus(&world.corpus, out.join("corpus")).map_err(HighlightError::from)?;
    for kit in &world.toolkits {
        save_toolkit(kit, &out.join("toolkits"))?;
    }
    let mut cases = Vec::new();
    for (rel, text) in WORKED_FILES {
        let path = out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, text)?;
        if rel.starts_with("cases/") {
            let f: CaseFixture = serde_json::from_str(text).expect("bundled fixture parses");
            cases.push(f.case_id);
        }
    }
    Ok(SynthSummary {
        out: out.to_path_buf(),
        slides: world.corpus.manifest().slides.len(),
        patches: world.corpus.total_records(),
        toolkits: world.toolkits.iter().map(|t| t.name.clone()).collect(),
        cases,
    })
}
