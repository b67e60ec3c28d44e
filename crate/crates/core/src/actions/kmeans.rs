//! Seeded k-means++ with Lloyd iterations over sparse embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ActionError, EmbeddingVector};
use crate::num::Real;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering<F> {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<F>>,
    pub sse: F,
    /// SSE after every centroid update, first entry after initialization.
    pub sse_history: Vec<F>,
    pub iterations: usize,
}

impl<F: Real> Clustering<F> {
    pub fn recompute_sse(&self, vectors: &[EmbeddingVector<F>]) -> F {
        vectors
            .iter()
            .zip(&self.assignments)
            .map(|(v, &c)| sq_dist_dense(v, &self.centroids[c]))
            .sum()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Full squared distance, every column visited.
fn sq_dist_dense<F: Real>(v: &EmbeddingVector<F>, c: &[F]) -> F {
    let dense = v.to_dense();
    dense
        .iter()
        .zip(c)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Squared distance using only the point's non-zero columns plus the
/// precomputed squared norm of the centroid.
/// The off-support part `c_norm_sq - sum(c_i^2)` is exactly zero when the
/// centroid lives on the point's support.
fn sq_dist<F: Real>(v: &EmbeddingVector<F>, c: &[F], c_norm_sq: F) -> F {
    let mut on = F::zero();
    let mut c_on = F::zero();
    for &(i, x) in v.entries() {
        let ci = c[i as usize];
        on = on + (x - ci) * (x - ci);
        c_on = c_on + ci * ci;
    }
    on + (c_norm_sq - c_on).max(F::zero())
}

fn norm_sq<F: Real>(c: &[F]) -> F {
    c.iter().map(|&x| x * x).sum()
}

pub fn kmeans_cluster<F: Real>(
    vectors: &[EmbeddingVector<F>],
    k: usize,
    seed: u64,
) -> Result<Clustering<F>, ActionError> {
    let n = vectors.len();
    if k == 0 {
        return Err(ActionError::ZeroClusters);
    }
    if k > n {
        return Err(ActionError::TooFewPoints { k, points: n });
    }
    let dim = vectors[0].dim();
    if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(ActionError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(vectors, k, &mut rng);
    let mut assignments = assign(vectors, &centroids, None);
    reseed_empty(vectors, &mut centroids, &mut assignments);
    centroids = update(vectors, &assignments, k, dim);
    let mut sse = total_sse(vectors, &centroids, &assignments);
    let mut sse_history = vec![sse];
    let mut iterations = 1;

    while iterations < MAX_ITERATIONS {
        let next = assign(vectors, &centroids, Some(&assignments));
        if next == assignments {
            break;
        }
        assignments = next;
        reseed_empty(vectors, &mut centroids, &mut assignments);
        centroids = update(vectors, &assignments, k, dim);
        sse = total_sse(vectors, &centroids, &assignments);
        sse_history.push(sse);
        iterations += 1;
    }

    Ok(Clustering {
        k,
        assignments,
        centroids,
        sse,
        sse_history,
        iterations,
    })
}

fn init_plus_plus<F: Real>(
    vectors: &[EmbeddingVector<F>],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<F>> {
    let n = vectors.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![vectors[first].to_dense()];
    let mut min_d2: Vec<f64> = {
        let c = &centroids[0];
        let cn = norm_sq(c);
        vectors
            .par_iter()
            .map(|v| sq_dist(v, c, cn).as_f64())
            .collect()
    };

    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in min_d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centroid already
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        let c = vectors[pick].to_dense();
        let cn = norm_sq(&c);
        min_d2
            .par_iter_mut()
            .zip(vectors.par_iter())
            .for_each(|(d, v)| {
                let nd = sq_dist(v, &c, cn).as_f64();
                if nd < *d {
                    *d = nd;
                }
            });
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid per point, ties to the lower index. A point keeps its
/// previous cluster unless another one is strictly closer.
fn assign<F: Real>(
    vectors: &[EmbeddingVector<F>],
    centroids: &[Vec<F>],
    previous: Option<&[usize]>,
) -> Vec<usize> {
    let norms: Vec<F> = centroids.iter().map(|c| norm_sq(c)).collect();
    vectors
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut best = 0;
            let mut best_d = sq_dist(v, &centroids[0], norms[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(v, c, norms[j]);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if let Some(prev) = previous {
                let p = prev[i];
                if p != best && sq_dist(v, &centroids[p], norms[p]) <= best_d {
                    return p;
                }
            }
            best
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that still has more than one member.
fn reseed_empty<F: Real>(
    vectors: &[EmbeddingVector<F>],
    centroids: &mut [Vec<F>],
    assignments: &mut [usize],
) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let norms: Vec<F> = centroids.iter().map(|c| norm_sq(c)).collect();
        let mut far: Option<(usize, F)> = None;
        for (i, v) in vectors.iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(v, &centroids[a], norms[a]);
            if far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let (p, _) = far.expect("k <= n guarantees a donor cluster");
        sizes[assignments[p]] -= 1;
        assignments[p] = empty;
        sizes[empty] = 1;
        centroids[empty] = vectors[p].to_dense();
    }
}

fn update<F: Real>(
    vectors: &[EmbeddingVector<F>],
    assignments: &[usize],
    k: usize,
    dim: usize,
) -> Vec<Vec<F>> {
    let mut sums = vec![vec![F::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        let s = &mut sums[a];
        for &(i, x) in v.entries() {
            s[i as usize] = s[i as usize] + x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            let denom = F::from_usize_lossy(c);
            for x in s.iter_mut() {
                *x = *x / denom;
            }
        }
    }
    sums
}

fn total_sse<F: Real>(
    vectors: &[EmbeddingVector<F>],
    centroids: &[Vec<F>],
    assignments: &[usize],
) -> F {
    let norms: Vec<F> = centroids.iter().map(|c| norm_sq(c)).collect();
    vectors
        .iter()
        .zip(assignments)
        .map(|(v, &a)| sq_dist(v, &centroids[a], norms[a]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[[f64; 2]]) -> Vec<EmbeddingVector<f64>> {
        raw.iter().map(|p| EmbeddingVector::from_dense(p)).collect()
    }

    /// SSE of a labelled partition with mean centroids, computed directly.
    fn partition_sse(raw: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<_> = raw.iter().zip(labels).filter(|(_, &l)| l == c).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let m = members.len() as f64;
            let cx = members.iter().map(|(p, _)| p[0]).sum::<f64>() / m;
            let cy = members.iter().map(|(p, _)| p[1]).sum::<f64>() / m;
            total += members
                .iter()
                .map(|(p, _)| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
                .sum::<f64>();
        }
        total
    }

    #[test]
    fn two_tight_pairs() {
        let raw = [[0.0, 1.0], [0.0, 0.99], [1.0, 0.0], [0.99, 0.0]];
        // exhaustive search over all 2-partitions
        let mut best = (f64::INFINITY, 0u32);
        for mask in 0u32..16 {
            let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            let s = partition_sse(&raw, &labels, 2);
            if s < best.0 {
                best = (s, mask);
            }
        }
        let same = |m: u32, a: usize, b: usize| ((m >> a) & 1) == ((m >> b) & 1);
        assert!(same(best.1, 0, 1) && same(best.1, 2, 3) && !same(best.1, 0, 2));

        for seed in 0..20 {
            let c = kmeans_cluster(&pts(&raw), 2, seed).unwrap();
            let a = &c.assignments;
            assert_eq!(a[0], a[1]);
            assert_eq!(a[2], a[3]);
            assert_ne!(a[0], a[2]);
            assert!((c.sse - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let raw = [[0.1, 0.2], [0.3, 0.9], [0.5, 0.5], [0.9, 0.1], [0.0, 0.0]];
        let c = kmeans_cluster(&pts(&raw), 5, 7).unwrap();
        let mut seen = c.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.sse, 0.0);
    }

    #[test]
    fn duplicates_with_k_equal_n_have_no_empty_cluster() {
        let raw = [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let c = kmeans_cluster(&pts(&raw), 4, 3).unwrap();
        assert!(c.cluster_sizes().iter().all(|&s| s == 1));
        assert_eq!(c.sse, 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let raw: Vec<[f64; 2]> = (0..40)
            .map(|i| [((i * 37) % 11) as f64 / 11.0, ((i * 13) % 7) as f64 / 7.0])
            .collect();
        let a = kmeans_cluster(&pts(&raw), 4, 99).unwrap();
        let b = kmeans_cluster(&pts(&raw), 4, 99).unwrap();
        assert_eq!(a, b);
        assert!((a.sse - a.recompute_sse(&pts(&raw))).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_k() {
        let p = pts(&[[0.0, 1.0]]);
        assert!(matches!(
            kmeans_cluster(&p, 2, 0),
            Err(ActionError::TooFewPoints { k: 2, points: 1 })
        ));
        assert!(matches!(kmeans_cluster(&p, 0, 0), Err(ActionError::ZeroClusters)));
    }
}
