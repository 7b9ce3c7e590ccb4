use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HighlightError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative within-cluster sum of squares change drops below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f32>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<V: AsRef<[f32]>>(members: &[V], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let to_f64 = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
    let first = rng.random_range(0..members.len());
    let mut centroids = vec![to_f64(members[first].as_ref())];
    let mut dists: Vec<f64> = members
        .iter()
        .map(|m| sq_dist(m.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&dists) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a centroid.
            Err(_) => centroids.len() % members.len(),
        };
        let c = to_f64(members[next].as_ref());
        for (d, m) in dists.iter_mut().zip(members) {
            *d = d.min(sq_dist(m.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed.
pub fn kmeans_augment<V: AsRef<[f32]>>(members: &[V], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 || members.len() < cfg.k {
        return Err(HighlightError::InsufficientSupport {
            needed: cfg.k.max(1),
            have: members.len(),
        });
    }
    let dim = members[0].as_ref().len();
    if let Some(bad) = members.iter().find(|m| m.as_ref().len() != dim) {
        return Err(HighlightError::Dimension {
            expected: dim,
            found: bad.as_ref().len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(members, cfg.k, &mut rng);
    let mut assignment = vec![0usize; members.len()];
    let mut wcss = Vec::new();
    let mut iterations = 0;
    loop {
        let mut total = 0.0;
        for (a, m) in assignment.iter_mut().zip(members) {
            let (c, d) = nearest(m.as_ref(), &centroids);
            *a = c;
            total += d;
        }
        let converged = match wcss.last() {
            Some(&prev) if prev > 0.0 => (prev - total) / prev < cfg.tol,
            Some(_) => true,
            None => false,
        };
        wcss.push(total);
        if converged || iterations >= cfg.max_iters {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0f64; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (&a, m) in assignment.iter().zip(members) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(m.as_ref()) {
                *s += f64::from(x);
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            // Empty clusters keep their previous centroid.
            if count > 0 {
                *centroid = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        centroids: centroids
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        assignment,
        wcss,
        iterations,
    })
}
