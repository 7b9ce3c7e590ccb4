use rayon::prelude::*;

use super::{HighlightError, Result, Toolkit};
use crate::store::{PatchBlock, PatchRecord};

const LANES: usize = 16;
/// Patch rows per parallel work unit.
const ROW_BLOCK: usize = 256;

/// Dot product with a fixed summation order: sixteen strided partial sums
/// reduced pairwise. The result depends only on the inputs.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    for (i, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[i] += x * y;
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            acc[i] += acc[i + width];
        }
    }
    acc[0]
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f32> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// N×T cosine similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), rows * cols, "matrix shape");
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, n: usize, t: usize) -> f32 {
        self.values[n * self.cols + t]
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.values[n * self.cols..(n + 1) * self.cols]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

fn prototype_norms(toolkit: &Toolkit, dim: usize) -> Result<Vec<f32>> {
    toolkit
        .prototypes
        .iter()
        .map(|p| {
            if p.vector.len() != dim {
                return Err(HighlightError::Dimension {
                    expected: dim,
                    found: p.vector.len(),
                });
            }
            let n = dot(&p.vector, &p.vector).sqrt();
            if n == 0.0 {
                Err(HighlightError::ZeroNorm(format!(
                    "prototype {:?} ({})",
                    p.description, p.level
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Similarities of a flat row-major patch matrix against every prototype.
/// `label` names patch `n` in zero-norm errors.
fn similarity_flat(
    data: &[f32],
    dim: usize,
    toolkit: &Toolkit,
    label: impl Fn(usize) -> String + Sync,
) -> Result<SimilarityMatrix> {
    let p_norms = prototype_norms(toolkit, dim)?;
    let rows = data.len() / dim;
    let cols = toolkit.prototypes.len();
    let mut values = vec![0f32; rows * cols];
    if cols == 0 {
        return Ok(SimilarityMatrix::from_values(rows, 0, values));
    }
    values
        .par_chunks_mut(ROW_BLOCK * cols)
        .enumerate()
        .try_for_each(|(b, out)| {
            let first = b * ROW_BLOCK;
            for (r, out_row) in out.chunks_exact_mut(cols).enumerate() {
                let n = first + r;
                let e = &data[n * dim..(n + 1) * dim];
                let ne = dot(e, e).sqrt();
                if ne == 0.0 {
                    return Err(HighlightError::ZeroNorm(format!("patch {}", label(n))));
                }
                for (t, (p, &np)) in toolkit.prototypes.iter().zip(&p_norms).enumerate() {
                    out_row[t] = (dot(e, &p.vector) / (ne * np)).clamp(-1.0, 1.0);
                }
            }
            Ok(())
        })?;
    Ok(SimilarityMatrix::from_values(rows, cols, values))
}

pub fn similarity_matrix(patches: &[PatchRecord], toolkit: &Toolkit) -> Result<SimilarityMatrix> {
    let Some(first) = patches.first() else {
        return Ok(SimilarityMatrix::from_values(0, toolkit.prototypes.len(), vec![]));
    };
    let dim = first.embedding.len();
    let mut data = Vec::with_capacity(patches.len() * dim);
    for p in patches {
        if p.embedding.len() != dim {
            return Err(HighlightError::Dimension {
                expected: dim,
                found: p.embedding.len(),
            });
        }
        data.extend_from_slice(&p.embedding);
    }
    similarity_flat(&data, dim, toolkit, |n| patches[n].image_id())
}

/// Similarities for a stored block, rows in the block's (y, x) order.
pub fn similarity_for_block(block: &PatchBlock, toolkit: &Toolkit) -> Result<SimilarityMatrix> {
    let data = block.sorted_matrix();
    let coords = block.sorted_coords();
    similarity_flat(&data, block.dim(), toolkit, |n| {
        format!("({},{})", coords[n].0, coords[n].1)
    })
}
