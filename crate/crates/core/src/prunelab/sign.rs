//! Direction-based filtering: per-cluster hyperplane sign vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{dot, VectorSet};
use crate::engine::{Index, PointFilter};
use crate::error::{Error, Result};

pub const DEFAULT_HYPERPLANES: usize = 32;
pub const MAX_HYPERPLANES: usize = 64;

/// `h` orthonormal directions drawn from a Gaussian and orthonormalized.
pub fn orthonormal_directions(h: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(h);
    while basis.len() < h {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // Two Gram-Schmidt passes keep the result orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis.into_iter().flatten().map(|x| x as f32).collect()
}

/// Per-cluster hyperplanes through the centroid and one sign bit per
/// (point, hyperplane).
#[derive(Debug, Clone, PartialEq)]
pub struct SignIndex {
    h: usize,
    dim: usize,
    centroids: Vec<f32>,
    /// Per cluster, `h * dim` row-major unit normals.
    normals: Vec<Vec<f32>>,
    /// Per cluster, one signature per member (ascending id order).
    signs: Vec<Vec<u64>>,
}

impl SignIndex {
    /// Builds over `points` partitioned by `members`, with `centroids` row-major.
    pub fn build(points: &VectorSet, centroids: &[f32], members: &[Vec<u32>], h: usize, seed: u64) -> Result<Self> {
        let dim = points.dim();
        if h == 0 || h > MAX_HYPERPLANES || h > dim {
            return Err(Error::InvalidParameter(format!(
                "hyperplane count must be in 1..={}, got {h}",
                MAX_HYPERPLANES.min(dim)
            )));
        }
        if centroids.len() != members.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: members.len() * dim,
                actual: centroids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normals = Vec::with_capacity(members.len());
        let mut signs = Vec::with_capacity(members.len());
        for (j, ids) in members.iter().enumerate() {
            let n = orthonormal_directions(h, dim, &mut rng);
            let c = &centroids[j * dim..(j + 1) * dim];
            signs.push(
                ids.iter()
                    .map(|&i| signature(points.row(i as usize), c, &n, dim))
                    .collect(),
            );
            normals.push(n);
        }
        Ok(Self {
            h,
            dim,
            centroids: centroids.to_vec(),
            normals,
            signs,
        })
    }

    /// Builds over the index's working vectors and clusters.
    pub fn for_index(index: &Index, h: usize, seed: u64) -> Result<Self> {
        let members: Vec<Vec<u32>> = (0..index.num_clusters()).map(|j| index.members(j).to_vec()).collect();
        Self::build(
            &index.working_vectors()?,
            index.clustering().centroids(),
            &members,
            h,
            seed,
        )
    }

    pub fn hyperplanes(&self) -> usize {
        self.h
    }

    pub fn num_clusters(&self) -> usize {
        self.signs.len()
    }

    pub fn normals(&self, cluster: usize) -> &[f32] {
        &self.normals[cluster]
    }

    pub fn signatures(&self, cluster: usize) -> &[u64] {
        &self.signs[cluster]
    }

    /// Sign vector of `q` against `cluster`'s hyperplanes.
    pub fn query_signature(&self, cluster: usize, q: &[f32]) -> u64 {
        let c = &self.centroids[cluster * self.dim..(cluster + 1) * self.dim];
        signature(q, c, &self.normals[cluster], self.dim)
    }
}

/// Bit `b` is set iff `<x - c, normal_b> >= 0`.
fn signature(x: &[f32], c: &[f32], normals: &[f32], dim: usize) -> u64 {
    let off: Vec<f32> = x.iter().zip(c).map(|(a, b)| a - b).collect();
    normals.chunks_exact(dim).enumerate().fold(
        0u64,
        |acc, (b, n)| if dot(&off, n) >= 0.0 { acc | (1 << b) } else { acc },
    )
}

/// Keeps members whose sign vector is within Hamming distance `threshold`
/// of the query's.
pub fn sign_filter(q: &[f32], cluster: usize, index: &SignIndex, threshold: u32) -> Vec<bool> {
    let s = index.query_signature(cluster, q);
    index.signs[cluster]
        .iter()
        .map(|&x| (x ^ s).count_ones() <= threshold)
        .collect()
}

/// [`sign_filter`] as an engine point filter.
#[derive(Debug, Clone, Copy)]
pub struct SignFilter<'a> {
    pub index: &'a SignIndex,
    pub threshold: u32,
}

impl PointFilter for SignFilter<'_> {
    fn keep_mask(&self, cluster: usize, q: &[f32]) -> Option<Vec<bool>> {
        if self.threshold as usize >= self.index.h {
            return None;
        }
        Some(sign_filter(q, cluster, self.index, self.threshold))
    }
}
