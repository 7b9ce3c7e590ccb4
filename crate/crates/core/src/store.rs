//! Per-slide patch-embedding corpora.
//!
//! A corpus directory holds one `manifest.json` and one binary block per
//! (slide, level), named `<slide>_<level>.emb`. A block starts with a fixed
//! 32-byte little-endian header followed by `rows` records, each record being
//! the grid column and row as `i32` and then `dim` `f32` values.
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"PEMB"
//! 4       4     version (u32, currently 1)
//! 8       4     dim (u32)
//! 12      4     reserved, zero
//! 16      8     rows (u64)
//! 24      8     reserved, zero
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLOCK_MAGIC: [u8; 4] = *b"PEMB";
pub const BLOCK_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("dimension mismatch in {path}: expected {expected}, found {found}")]
    Dimension {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in record {record}")]
    Data { record: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("duplicate patch {0}")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Magnification tag of a patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "5x")]
    X5,
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "20x")]
    X20,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::X5, Level::X10, Level::X20];

    pub fn tag(self) -> &'static str {
        match self {
            Level::X5 => "5x",
            Level::X10 => "10x",
            Level::X20 => "20x",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Level {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "5x" | "5×" => Ok(Level::X5),
            "10x" | "10×" => Ok(Level::X10),
            "20x" | "20×" => Ok(Level::X20),
            other => Err(StoreError::NotFound(format!("level {other}"))),
        }
    }
}

/// One embedded patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: i32,
    pub y: i32,
    pub level: Level,
    pub embedding: Vec<f32>,
}

impl PatchRecord {
    /// Stable image identifier, `<slide>@<level>:<x>,<y>`. Backends resolve
    /// these to pixels; the engine never ships image data.
    pub fn image_id(&self) -> String {
        image_id(&self.slide_id, self.level, self.x, self.y)
    }
}

pub fn image_id(slide_id: &str, level: Level, x: i32, y: i32) -> String {
    format!("{slide_id}@{level}:{x},{y}")
}

/// Inverse of [`image_id`].
pub fn parse_image_id(id: &str) -> Option<(&str, Level, i32, i32)> {
    let (slide, rest) = id.rsplit_once('@')?;
    let (level, xy) = rest.split_once(':')?;
    let (x, y) = xy.split_once(',')?;
    Some((slide, level.parse().ok()?, x.parse().ok()?, y.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub count: usize,
    /// Patch grid pitch in pixels at this magnification.
    pub pitch_px: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub levels: BTreeMap<Level, LevelEntry>,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub dim: usize,
    pub slides: Vec<SlideManifest>,
}

/// Embeddings of one (slide, level), stored contiguously in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBlock {
    dim: usize,
    coords: Vec<(i32, i32)>,
    data: Vec<f32>,
    /// Row indices in ascending (y, x) order.
    order: Vec<usize>,
}

impl PatchBlock {
    pub fn new(dim: usize, coords: Vec<(i32, i32)>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::Format {
                path: "<memory>".into(),
                reason: "dimension must be positive".into(),
            });
        }
        if data.len() != coords.len() * dim {
            return Err(StoreError::Dimension {
                path: "<memory>".into(),
                expected: coords.len() * dim,
                found: data.len(),
            });
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| (coords[i].1, coords[i].0));
        for pair in order.windows(2) {
            if coords[pair[0]] == coords[pair[1]] {
                let (x, y) = coords[pair[0]];
                return Err(StoreError::Duplicate(format!("({x},{y})")));
            }
        }
        Ok(Self {
            dim,
            coords,
            data,
            order,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Row in sorted position `i` as (x, y, embedding).
    pub fn sorted_row(&self, i: usize) -> (i32, i32, &[f32]) {
        let r = self.order[i];
        let (x, y) = self.coords[r];
        (x, y, &self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn sorted_rows(&self) -> impl Iterator<Item = (i32, i32, &[f32])> + '_ {
        (0..self.len()).map(move |i| self.sorted_row(i))
    }

    /// Embeddings in (y, x) order, flattened row-major.
    pub fn sorted_matrix(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len());
        for &r in &self.order {
            out.extend_from_slice(&self.data[r * self.dim..(r + 1) * self.dim]);
        }
        out
    }

    /// Embedding stored at grid position (x, y).
    pub fn embedding_at(&self, x: i32, y: i32) -> Option<&[f32]> {
        let i = self
            .order
            .binary_search_by_key(&(y, x), |&r| (self.coords[r].1, self.coords[r].0))
            .ok()?;
        Some(self.sorted_row(i).2)
    }

    /// Coordinates in (y, x) order.
    pub fn sorted_coords(&self) -> Vec<(i32, i32)> {
        self.order.iter().map(|&r| self.coords[r]).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_block(self.dim, &self.coords, &self.data)
    }
}

pub fn encode_block(dim: usize, coords: &[(i32, i32)], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + coords.len() * (8 + 4 * dim));
    out.extend_from_slice(&BLOCK_MAGIC);
    out.extend_from_slice(&BLOCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(coords.len() as u64).to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    for (i, &(x, y)) in coords.iter().enumerate() {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
        for v in &data[i * dim..(i + 1) * dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decoded block contents: declared dim, coordinates in file order, flat data.
pub struct RawBlock {
    pub dim: usize,
    pub coords: Vec<(i32, i32)>,
    pub data: Vec<f32>,
}

pub fn decode_block(bytes: &[u8], path: &str) -> Result<RawBlock> {
    let format = |reason: &str| StoreError::Format {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(format("truncated header"));
    }
    if bytes[0..4] != BLOCK_MAGIC {
        return Err(format("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BLOCK_VERSION {
        return Err(format(&format!("unsupported version {version}")));
    }
    let dim = u32_at(8) as usize;
    if dim == 0 {
        return Err(format("zero dimension"));
    }
    let rows = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let row_len = 8 + 4 * dim;
    let body = &bytes[HEADER_LEN..];
    if rows.checked_mul(row_len) != Some(body.len()) {
        return Err(format(&format!(
            "body is {} bytes, header declares {rows} rows of {row_len}",
            body.len()
        )));
    }
    let mut coords = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for row in body.chunks_exact(row_len) {
        let x = i32::from_le_bytes(row[0..4].try_into().unwrap());
        let y = i32::from_le_bytes(row[4..8].try_into().unwrap());
        coords.push((x, y));
        data.extend(
            row[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
    }
    Ok(RawBlock { dim, coords, data })
}

pub fn block_file_name(slide_id: &str, level: Level) -> String {
    format!("{slide_id}_{level}.emb")
}

/// Read-only view over an ingested corpus.
#[derive(Debug, Clone)]
pub struct CorpusHandle {
    root: PathBuf,
    manifest: CorpusManifest,
    blocks: BTreeMap<(String, Level), PatchBlock>,
}

impl CorpusHandle {
    /// Build an in-memory corpus. Blocks must agree on `dim`.
    pub fn from_blocks(
        dim: usize,
        slides: Vec<(SlideManifest, Vec<(Level, PatchBlock)>)>,
    ) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        let mut manifests = Vec::new();
        for (mut slide, levels) in slides {
            for (level, block) in levels {
                if block.dim() != dim {
                    return Err(StoreError::Dimension {
                        path: block_file_name(&slide.slide_id, level),
                        expected: dim,
                        found: block.dim(),
                    });
                }
                check_finite(&slide.slide_id, level, &block)?;
                let entry = slide.levels.entry(level).or_insert(LevelEntry {
                    count: 0,
                    pitch_px: 256,
                });
                entry.count = block.len();
                blocks.insert((slide.slide_id.clone(), level), block);
            }
            manifests.push(slide);
        }
        Ok(Self {
            root: PathBuf::new(),
            manifest: CorpusManifest {
                format_version: MANIFEST_VERSION,
                dim,
                slides: manifests,
            },
            blocks,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn slide_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.slides.iter().map(|s| s.slide_id.as_str())
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideManifest> {
        self.manifest.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn counts(&self, slide_id: &str) -> Option<BTreeMap<Level, usize>> {
        self.slide(slide_id)
            .map(|s| s.levels.iter().map(|(l, e)| (*l, e.count)).collect())
    }

    pub fn total_records(&self) -> usize {
        self.blocks.values().map(PatchBlock::len).sum()
    }

    pub fn block(&self, slide_id: &str, level: Level) -> Result<&PatchBlock> {
        self.blocks
            .get(&(slide_id.to_string(), level))
            .ok_or_else(|| StoreError::NotFound(format!("{slide_id} at {level}")))
    }

    /// Embedding behind an image id produced by [`image_id`].
    pub fn resolve(&self, id: &str) -> Option<&[f32]> {
        let (slide, level, x, y) = parse_image_id(id)?;
        self.blocks.get(&(slide.to_string(), level))?.embedding_at(x, y)
    }

    /// All patches of (slide, level) in ascending (y, x) order.
    pub fn fetch_patches(&self, slide_id: &str, level: Level) -> Result<Vec<PatchRecord>> {
        let block = self.block(slide_id, level)?;
        Ok(block
            .sorted_rows()
            .map(|(x, y, e)| PatchRecord {
                slide_id: slide_id.to_string(),
                x,
                y,
                level,
                embedding: e.to_vec(),
            })
            .collect())
    }

    /// Like [`fetch_patches`](Self::fetch_patches) but takes a textual level tag.
    pub fn fetch_patches_tagged(&self, slide_id: &str, level: &str) -> Result<Vec<PatchRecord>> {
        self.fetch_patches(slide_id, level.parse()?)
    }

    /// Iterate every record of the corpus, slide by slide and level by level.
    pub fn iter_records(&self) -> impl Iterator<Item = PatchRecord> + '_ {
        self.blocks.iter().flat_map(|((slide, level), block)| {
            block.sorted_rows().map(move |(x, y, e)| PatchRecord {
                slide_id: slide.clone(),
                x,
                y,
                level: *level,
                embedding: e.to_vec(),
            })
        })
    }
}

fn check_finite(slide_id: &str, level: Level, block: &PatchBlock) -> Result<()> {
    for (row, chunk) in block.data.chunks_exact(block.dim).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            let (x, y) = block.coords[row];
            return Err(StoreError::Data {
                record: format!("{} (row {row})", image_id(slide_id, level, x, y)),
            });
        }
    }
    Ok(())
}

/// Ingest and validate a corpus directory.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<CorpusHandle> {
    let root = path.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| StoreError::Format {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(StoreError::Format {
            path: manifest_path.display().to_string(),
            reason: format!("unsupported manifest version {}", manifest.format_version),
        });
    }
    if manifest.dim == 0 {
        return Err(StoreError::Format {
            path: manifest_path.display().to_string(),
            reason: "dim must be positive".into(),
        });
    }
    let mut blocks = BTreeMap::new();
    for slide in &manifest.slides {
        for (&level, entry) in &slide.levels {
            let file = root.join(block_file_name(&slide.slide_id, level));
            let display = file.display().to_string();
            let mut bytes = Vec::new();
            fs::File::open(&file)?.read_to_end(&mut bytes)?;
            let raw = decode_block(&bytes, &display)?;
            if raw.dim != manifest.dim {
                return Err(StoreError::Dimension {
                    path: display,
                    expected: manifest.dim,
                    found: raw.dim,
                });
            }
            if raw.coords.len() != entry.count {
                return Err(StoreError::Format {
                    path: display,
                    reason: format!(
                        "manifest declares {} patches, block holds {}",
                        entry.count,
                        raw.coords.len()
                    ),
                });
            }
            let block = PatchBlock::new(raw.dim, raw.coords, raw.data).map_err(|e| match e {
                StoreError::Duplicate(what) => {
                    StoreError::Duplicate(format!("{} {what}", slide.slide_id))
                }
                other => other,
            })?;
            check_finite(&slide.slide_id, level, &block)?;
            blocks.insert((slide.slide_id.clone(), level), block);
        }
    }
    Ok(CorpusHandle {
        root: root.to_path_buf(),
        manifest,
        blocks,
    })
}

/// Write a corpus to `path`, creating the directory if needed. Blocks are
/// written in the row order they were ingested with.
pub fn write_corpus(corpus: &CorpusHandle, path: impl AsRef<Path>) -> Result<()> {
    let root = path.as_ref();
    fs::create_dir_all(root)?;
    for ((slide, level), block) in &corpus.blocks {
        let mut f = fs::File::create(root.join(block_file_name(slide, *level)))?;
        f.write_all(&block.encode())?;
    }
    let text = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serializes");
    fs::write(root.join(MANIFEST_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_block(n: i32, dim: usize) -> PatchBlock {
        let coords: Vec<_> = (0..n).map(|i| (n - 1 - i, i % 2)).collect();
        let data = (0..n as usize * dim).map(|v| v as f32 * 0.25).collect();
        PatchBlock::new(dim, coords, data).unwrap()
    }

    fn one_slide(dim: usize) -> CorpusHandle {
        let slide = SlideManifest {
            slide_id: "S1".into(),
            levels: BTreeMap::new(),
            provenance: "unit".into(),
        };
        CorpusHandle::from_blocks(dim, vec![(slide, vec![(Level::X10, tiny_block(4, dim))])])
            .unwrap()
    }

    #[test]
    fn reports_counts_after_ingest() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&one_slide(8), dir.path()).unwrap();
        let handle = ingest_corpus(dir.path()).unwrap();
        let counts = handle.counts("S1").unwrap();
        assert_eq!(counts, BTreeMap::from([(Level::X10, 4)]));
    }

    #[test]
    fn image_ids_resolve_to_their_rows() {
        let c = one_slide(8);
        for rec in c.fetch_patches("S1", Level::X10).unwrap() {
            let id = rec.image_id();
            assert_eq!(parse_image_id(&id), Some(("S1", Level::X10, rec.x, rec.y)));
            assert_eq!(c.resolve(&id), Some(rec.embedding.as_slice()));
        }
        assert_eq!(c.resolve("S1@10x:99,99"), None);
        assert_eq!(parse_image_id("no-level"), None);
    }

    #[test]
    fn manifest_dim_disagreeing_with_block_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&one_slide(8), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"dim\": 8", "\"dim\": 16");
        fs::write(&path, text).unwrap();
        match ingest_corpus(dir.path()) {
            Err(StoreError::Dimension {
                expected, found, ..
            }) => assert_eq!((expected, found), (16, 8)),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&one_slide(8), dir.path()).unwrap();
        let block = dir.path().join(block_file_name("S1", Level::X10));
        let mut bytes = fs::read(&block).unwrap();
        bytes[0] = b'X';
        fs::write(&block, &bytes).unwrap();
        assert!(matches!(
            ingest_corpus(dir.path()),
            Err(StoreError::Format { .. })
        ));
        fs::write(&block, &bytes[..10]).unwrap();
        assert!(matches!(
            ingest_corpus(dir.path()),
            Err(StoreError::Format { .. })
        ));
    }

    #[test]
    fn non_finite_value_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&one_slide(8), dir.path()).unwrap();
        let block = dir.path().join(block_file_name("S1", Level::X10));
        let mut bytes = fs::read(&block).unwrap();
        // third row, first float
        let off = HEADER_LEN + 2 * (8 + 32) + 8;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&block, &bytes).unwrap();
        match ingest_corpus(dir.path()) {
            Err(StoreError::Data { record }) => assert!(record.contains("row 2"), "{record}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn fetch_is_sorted_and_repeatable() {
        let corpus = one_slide(8);
        let a = corpus.fetch_patches("S1", Level::X10).unwrap();
        let b = corpus.fetch_patches("S1", Level::X10).unwrap();
        assert_eq!(a, b);
        let keys: Vec<_> = a.iter().map(|p| (p.y, p.x)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn unknown_slide_or_level_is_not_found() {
        let corpus = one_slide(8);
        assert!(matches!(
            corpus.fetch_patches_tagged("S1", "40x"),
            Err(StoreError::NotFound(_))
        ));
        assert!(matches!(
            corpus.fetch_patches("S1", Level::X20),
            Err(StoreError::NotFound(_))
        ));
        assert!(matches!(
            corpus.fetch_patches("nope", Level::X10),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn duplicate_coordinates_are_rejected() {
        let err = PatchBlock::new(2, vec![(0, 0), (0, 0)], vec![0.0; 4]).unwrap_err();
        assert!(matches!(err, StoreError::Duplicate(_)));
    }
}
