//! Lloyd's k-means with k-means++ seeding, used both for the IVF partition
//! and for the 16-centroid PQ sub-codebooks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{l2_squared, normalize_in_place, select_topk, Metric, Neighbor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once the relative objective improvement drops below this.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            epsilon: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    dim: usize,
    centroids: Vec<f32>,
    normalized: Option<Vec<f32>>,
    assignment: Vec<u32>,
    sizes: Vec<u32>,
    objective_trace: Vec<f64>,
}

impl Clustering {
    pub(crate) fn from_parts(
        dim: usize,
        centroids: Vec<f32>,
        normalized: Option<Vec<f32>>,
        assignment: Vec<u32>,
    ) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter("malformed centroid table".into()));
        }
        let k = centroids.len() / dim;
        if normalized.as_ref().is_some_and(|n| n.len() != centroids.len()) {
            return Err(Error::InvalidParameter("malformed normalized centroids".into()));
        }
        let mut sizes = vec![0u32; k];
        for &a in &assignment {
            let slot = sizes
                .get_mut(a as usize)
                .ok_or_else(|| Error::InvalidParameter(format!("assignment {a} >= {k}")))?;
            *slot += 1;
        }
        Ok(Self {
            dim,
            centroids,
            normalized,
            assignment,
            sizes,
            objective_trace: Vec::new(),
        })
    }

    pub(crate) fn with_objective_trace(mut self, trace: Vec<f64>) -> Self {
        self.objective_trace = trace;
        self
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Unit-norm copy of centroid `j`; the raw mean when no normalized copies exist.
    #[inline]
    pub fn normalized_centroid(&self, j: usize) -> &[f32] {
        match &self.normalized {
            Some(n) => &n[j * self.dim..(j + 1) * self.dim],
            None => self.centroid(j),
        }
    }

    pub fn normalized_centroids(&self) -> Option<&[f32]> {
        self.normalized.as_deref()
    }

    /// Adds unit-norm copies of the raw-mean centroids.
    pub fn with_normalized(mut self) -> Self {
        let mut n = self.centroids.clone();
        for row in n.chunks_exact_mut(self.dim) {
            normalize_in_place(row);
        }
        self.normalized = Some(n);
        self
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    /// Objective value recorded at each assignment step.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    /// Member point ids per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.sizes.iter().map(|&s| Vec::with_capacity(s as usize)).collect();
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a as usize].push(i as u32);
        }
        out
    }

    /// Sum of squared distances of every point to its assigned centroid.
    pub fn objective(&self, data: &[f32]) -> f64 {
        data.chunks_exact(self.dim)
            .zip(&self.assignment)
            .map(|(x, &a)| l2_squared(x, self.centroid(a as usize)) as f64)
            .sum()
    }
}

pub fn train_kmeans(data: &[f32], dim: usize, k: usize, config: &KMeansConfig) -> Result<Clustering> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::InvalidParameter("data does not divide into rows".into()));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::NotEnoughPoints {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = kmeans_plus_plus(data, dim, k, &mut rng);
    let mut assignment = vec![0u32; n];
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;

    for _ in 0..config.max_iters.max(1) {
        let dists = assign_all(data, dim, &centroids, &mut assignment);
        let objective: f64 = dists.iter().map(|&d| d as f64).sum();
        trace.push(objective);
        update_centroids(data, dim, k, &mut centroids, &mut assignment);
        if prev.is_finite() && prev - objective <= config.epsilon * prev {
            break;
        }
        prev = objective;
    }

    let mut sizes = vec![0u32; k];
    for &a in &assignment {
        sizes[a as usize] += 1;
    }
    Ok(Clustering {
        dim,
        centroids,
        normalized: None,
        assignment,
        sizes,
        objective_trace: trace,
    })
}

fn kmeans_plus_plus(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d2: Vec<f32> = (0..n).into_par_iter().map(|i| l2_squared(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d2.iter().map(|&d| d as f64).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                target -= d as f64;
                if target < 0.0 && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        min_d2
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(l2_squared(row(i), &c)));
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Nearest centroid per point (ties to the smaller id). Returns the squared distances.
fn assign_all(data: &[f32], dim: usize, centroids: &[f32], assignment: &mut [u32]) -> Vec<f32> {
    let mut dists = vec![0f32; assignment.len()];
    data.par_chunks_exact(dim)
        .zip(assignment.par_iter_mut())
        .zip(dists.par_iter_mut())
        .for_each(|((x, a), d)| {
            let (best, dist) = nearest(x, centroids, dim);
            *a = best;
            *d = dist;
        });
    dists
}

#[inline]
fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> (u32, f32) {
    let mut best = 0u32;
    let mut best_d = f32::INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_squared(x, c);
        if d < best_d {
            best_d = d;
            best = j as u32;
        }
    }
    (best, best_d)
}

/// Recomputes means in point order (f64 sums) and repairs empty clusters by
/// moving the farthest point of the largest cluster into them.
fn update_centroids(data: &[f32], dim: usize, k: usize, centroids: &mut [f32], assignment: &mut [u32]) {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &a) in data.chunks_exact(dim).zip(assignment.iter()) {
        let a = a as usize;
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
    }
    let write_mean = |centroids: &mut [f32], sums: &[f64], counts: &[usize], j: usize| {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&sums[j * dim..(j + 1) * dim])
            {
                *c = (s * inv) as f32;
            }
        }
    };
    for j in 0..k {
        write_mean(centroids, &sums, &counts, j);
    }

    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let donor_centroid = centroids[largest * dim..(largest + 1) * dim].to_vec();
        let (far, _) = assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a as usize == largest)
            .map(|(i, _)| (i, l2_squared(&data[i * dim..(i + 1) * dim], &donor_centroid)))
            .fold(
                (usize::MAX, f32::NEG_INFINITY),
                |acc, cur| if cur.1 > acc.1 { cur } else { acc },
            );
        let x = &data[far * dim..(far + 1) * dim];
        assignment[far] = empty as u32;
        counts[largest] -= 1;
        counts[empty] = 1;
        for (s, &v) in sums[largest * dim..(largest + 1) * dim].iter_mut().zip(x) {
            *s -= v as f64;
        }
        for (s, &v) in sums[empty * dim..(empty + 1) * dim].iter_mut().zip(x) {
            *s = v as f64;
        }
        write_mean(centroids, &sums, &counts, largest);
        write_mean(centroids, &sums, &counts, empty);
    }
}

/// Nearest centroid under squared L2, ties to the smaller id.
pub fn assign_point(x: &[f32], clustering: &Clustering) -> Result<u32> {
    if x.len() != clustering.dim {
        return Err(Error::DimensionMismatch {
            expected: clustering.dim,
            actual: x.len(),
        });
    }
    Ok(nearest(x, &clustering.centroids, clustering.dim).0)
}

/// The `n` closest clusters with their scores, best first. Angular uses the
/// normalized centroids; L2 and inner product use the raw means.
pub fn rank_clusters(q: &[f32], clustering: &Clustering, n: usize, metric: Metric) -> Result<Vec<Neighbor>> {
    let k = clustering.k();
    if n > k {
        return Err(Error::NotEnoughPoints {
            requested: n,
            available: k,
        });
    }
    if q.len() != clustering.dim {
        return Err(Error::DimensionMismatch {
            expected: clustering.dim,
            actual: q.len(),
        });
    }
    let all = (0..k)
        .map(|j| {
            let c = match metric {
                Metric::Angular => clustering.normalized_centroid(j),
                _ => clustering.centroid(j),
            };
            Neighbor {
                id: j as u32,
                distance: metric.score(q, c),
            }
        })
        .collect();
    Ok(select_topk(all, n))
}

pub fn top_n_clusters(q: &[f32], clustering: &Clustering, n: usize, metric: Metric) -> Result<Vec<u32>> {
    Ok(rank_clusters(q, clustering, n, metric)?
        .into_iter()
        .map(|c| c.id)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_data(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn k_equals_n_is_perfect() {
        let data = random_data(20, 3, 1);
        let c = train_kmeans(&data, 3, 20, &KMeansConfig::default()).unwrap();
        assert_eq!(c.objective(&data), 0.0);
        assert!(c.sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn k_one_is_mean() {
        let data = random_data(100, 4, 2);
        let c = train_kmeans(&data, 4, 1, &KMeansConfig::default()).unwrap();
        for d in 0..4 {
            let mean: f64 = data.chunks_exact(4).map(|r| r[d] as f64).sum::<f64>() / 100.0;
            assert!((c.centroid(0)[d] as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 8;
        let mut data = Vec::new();
        let mut sums = [[0f64; 8]; 2];
        for i in 0..400 {
            let side = i % 2;
            for (d, sum) in sums[side].iter_mut().enumerate().take(dim) {
                let noise: f32 = StandardNormal.sample(&mut rng);
                let v = if d == 0 {
                    if side == 0 {
                        10.0
                    } else {
                        -10.0
                    }
                } else {
                    0.0
                } + noise;
                *sum += v as f64;
                data.push(v);
            }
        }
        let c = train_kmeans(
            &data,
            dim,
            2,
            &KMeansConfig {
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        for (side, sum) in sums.iter().enumerate() {
            let mean: Vec<f32> = sum.iter().map(|s| (*s / 200.0) as f32).collect();
            let best = (0..2)
                .map(|j| l2_squared(c.centroid(j), &mean).sqrt())
                .fold(f32::INFINITY, f32::min);
            assert!(best < 0.5, "blob {side} centroid off by {best}");
        }
    }

    #[test]
    fn errors() {
        let data = random_data(5, 2, 4);
        assert!(train_kmeans(&data, 2, 0, &KMeansConfig::default()).is_err());
        assert!(matches!(
            train_kmeans(&data, 2, 6, &KMeansConfig::default()),
            Err(Error::NotEnoughPoints { .. })
        ));
    }

    #[test]
    fn duplicate_points_leave_no_empty_cluster() {
        let data = vec![1.0f32; 40];
        let c = train_kmeans(&data, 2, 4, &KMeansConfig::default()).unwrap();
        assert!(c.sizes().iter().all(|&s| s > 0));
        assert_eq!(c.sizes().iter().sum::<u32>(), 20);
    }

    #[test]
    fn assign_point_ties_to_smaller_id() {
        let c = Clustering::from_parts(1, vec![5.0, -1.0, 9.0, 7.0, 1.0], None, vec![0, 1, 2, 3, 4]).unwrap();
        assert_eq!(assign_point(&[9.0], &c).unwrap(), 2);
        // 0.0 is equidistant to centroids 1 (-1) and 4 (+1).
        assert_eq!(assign_point(&[0.0], &c).unwrap(), 1);
    }

    #[test]
    fn top_n_examples() {
        let data = random_data(300, 4, 5);
        let c = train_kmeans(&data, 4, 10, &KMeansConfig::default()).unwrap();
        let all = top_n_clusters(c.centroid(7), &c, 10, Metric::L2).unwrap();
        assert_eq!(all.len(), 10);
        assert_eq!(top_n_clusters(c.centroid(7), &c, 1, Metric::L2).unwrap(), vec![7]);
        assert!(top_n_clusters(c.centroid(7), &c, 11, Metric::L2).is_err());
    }
}
