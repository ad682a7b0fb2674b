//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{normalize_in_place, Metric, VectorSet};

/// `n` points around `centers` Gaussian centers (center coordinates drawn
/// from `N(0, 1)`, points at `N(center, spread^2)` per coordinate).
pub fn gaussian_mixture(n: usize, dim: usize, centers: usize, spread: f32, seed: u64) -> VectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = centers.max(1);
    let c: Vec<f32> = (0..centers * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0f32, spread).expect("finite spread");
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let j = rng.random_range(0..centers);
        data.extend(c[j * dim..(j + 1) * dim].iter().map(|&m| m + noise.sample(&mut rng)));
    }
    VectorSet::new(dim, Metric::L2, data).expect("finite data")
}

/// Unit vectors scattered around `centers` random directions; `spread` is
/// the per-coordinate noise relative to a unit-length center.
pub fn unit_sphere_mixture(n: usize, dim: usize, centers: usize, spread: f32, seed: u64) -> VectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = centers.max(1);
    let mut c: Vec<f32> = (0..centers * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    for row in c.chunks_exact_mut(dim) {
        normalize_in_place(row);
    }
    let sigma = spread / (dim as f32).sqrt();
    let noise = Normal::new(0.0f32, sigma).expect("finite spread");
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let j = rng.random_range(0..centers);
        let mut v: Vec<f32> = c[j * dim..(j + 1) * dim]
            .iter()
            .map(|&m| m + noise.sample(&mut rng))
            .collect();
        normalize_in_place(&mut v);
        data.extend(v);
    }
    VectorSet::new(dim, Metric::Angular, data).expect("finite data")
}

/// Splits the first `n_queries` rows off as queries: `(base, queries)`.
pub fn split_queries(set: &VectorSet, n_queries: usize) -> (VectorSet, VectorSet) {
    let nq = n_queries.min(set.len());
    let q: Vec<usize> = (0..nq).collect();
    let b: Vec<usize> = (nq..set.len()).collect();
    (set.select(&b), set.select(&q))
}
