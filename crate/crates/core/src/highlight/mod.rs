//! Prototype-based slide highlighting over precomputed patch embeddings.
//!
//! A [`Toolkit`] holds mean-embedding prototypes for a set of morphological
//! descriptions. Patches are scored against every prototype by cosine
//! similarity, then either assigned to their best description (region-level
//! grounding) or retrieved per description by top-k (entity-level
//! localization).

mod gleason;
mod kmeans;
mod prototype;
mod select;
mod similarity;

pub use gleason::{decide_gleason, gleason_area_map, GleasonCall, GleasonMap, GLEASON_CATEGORIES};
pub use kmeans::{kmeans_augment, KMeansConfig, KMeansResult};
pub use prototype::{
    build_prototype, build_toolkit, load_toolkit, save_toolkit, EntryRecipe, Prototype,
    PrototypeOptions, SupportSpec, Toolkit, ToolkitMode, ToolkitRecipe,
};
pub use select::{
    ground_regions, kmeans_rois, localize_entities, select_rois_region, Grounding, Localized,
    PatchGrid, Provenance, RoiEntry, RoiSelection,
};
pub use similarity::{cosine, dot, similarity_for_block, similarity_matrix, SimilarityMatrix};

use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum HighlightError {
    #[error("prototype {0:?} has an empty support set")]
    EmptySupport(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no suspicious region found")]
    EmptyHighlight,
    #[error("k-means needs at least {needed} members, got {have}")]
    InsufficientSupport { needed: usize, have: usize },
    #[error("no tumor-pattern patches")]
    NoTumor,
    #[error("toolkit file error: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HighlightError> = std::result::Result<T, E>;
