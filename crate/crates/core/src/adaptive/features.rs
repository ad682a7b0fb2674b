//! Per-cluster statistics and the query / cluster feature vectors fed to the
//! predictors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{dot, l2_squared, Neighbor, VectorSet};
use crate::error::{Error, Result};
use crate::kmeans::Clustering;

pub const HISTOGRAM_BINS: usize = 8;
pub const DEFAULT_FEATURE_CENTROIDS: usize = 16;
pub const OUTLIER_PERCENTILE: f64 = 0.95;
const POWER_TOL: f32 = 1e-4;
const POWER_MAX_ITERS: usize = 100;

/// Geometry of one cluster around its raw-mean centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub size: u32,
    /// Largest point-to-centroid distance.
    pub radius: f32,
    /// Top principal directions (unit length, or zero when undefined).
    pub pc1: Vec<f32>,
    pub pc2: Vec<f32>,
    /// Distance beyond which a point counts as an outlier.
    pub outlier_cut: f32,
    pub outliers: Vec<u32>,
    /// Unit mean direction of the outliers' offsets, zero if there are none.
    pub outlier_direction: Vec<f32>,
    /// Point counts over `HISTOGRAM_BINS` equal-width bins of `[0, radius]`.
    pub histogram: [u32; HISTOGRAM_BINS],
    /// Principal components could not be estimated (fewer than two distinct points).
    pub degenerate: bool,
}

fn normalize(v: &mut [f32]) -> f32 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of the (implicit) covariance of `offsets`, orthogonal
/// to every (unit) vector in `deflate`. Returns a zero vector if the
/// projected variance vanishes.
pub(crate) fn power_iteration(offsets: &[f32], dim: usize, deflate: &[&[f32]], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let project_out = |v: &mut [f32]| {
        for p in deflate {
            let c = dot(v, p);
            v.iter_mut().zip(p.iter()).for_each(|(x, &y)| *x -= c * y);
        }
    };
    project_out(&mut v);
    if normalize(&mut v) == 0.0 {
        return vec![0.0; dim];
    }
    let mut next = vec![0f32; dim];
    for _ in 0..POWER_MAX_ITERS {
        next.iter_mut().for_each(|x| *x = 0.0);
        for o in offsets.chunks_exact(dim) {
            let c = dot(o, &v);
            next.iter_mut().zip(o).for_each(|(x, &y)| *x += c * y);
        }
        project_out(&mut next);
        if normalize(&mut next) < 1e-20 {
            return vec![0.0; dim];
        }
        let delta = l2_squared(&next, &v).sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOL {
            break;
        }
    }
    v
}

fn stats_for(points: &[f32], dim: usize, centroid: &[f32], seed: u64) -> ClusterStats {
    let n = points.len() / dim;
    let mut offsets = points.to_vec();
    for o in offsets.chunks_exact_mut(dim) {
        o.iter_mut().zip(centroid).for_each(|(x, &c)| *x -= c);
    }
    let dists: Vec<f32> = offsets.chunks_exact(dim).map(|o| dot(o, o).sqrt()).collect();
    let radius = dists.iter().copied().fold(0f32, f32::max);
    let mut sorted = dists.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    let outlier_cut = if n == 0 {
        0.0
    } else {
        sorted[((OUTLIER_PERCENTILE * n as f64).ceil() as usize).clamp(1, n) - 1]
    };
    let outliers: Vec<u32> = (0..n as u32).filter(|&i| dists[i as usize] > outlier_cut).collect();
    let mut outlier_direction = vec![0f32; dim];
    for &i in &outliers {
        let o = &offsets[i as usize * dim..(i as usize + 1) * dim];
        outlier_direction.iter_mut().zip(o).for_each(|(x, &y)| *x += y);
    }
    normalize(&mut outlier_direction);
    let mut histogram = [0u32; HISTOGRAM_BINS];
    for &d in &dists {
        let b = if radius > 0.0 {
            ((d / radius) * HISTOGRAM_BINS as f32) as usize
        } else {
            0
        };
        histogram[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    let degenerate = radius == 0.0 || n < 2;
    let (pc1, pc2) = if degenerate {
        (vec![0.0; dim], vec![0.0; dim])
    } else {
        let pc1 = power_iteration(&offsets, dim, &[], seed);
        let pc2 = if pc1.iter().all(|&x| x == 0.0) {
            vec![0.0; dim]
        } else {
            power_iteration(&offsets, dim, &[&pc1], seed ^ 0x5bd1_e995)
        };
        (pc1, pc2)
    };
    ClusterStats {
        size: n as u32,
        radius,
        pc1,
        pc2,
        outlier_cut,
        outliers,
        outlier_direction,
        histogram,
        degenerate,
    }
}

/// Statistics for every cluster of `clustering` over the points of `set`.
/// `outliers` hold positions within each cluster's ascending member list.
pub fn build_cluster_stats(set: &VectorSet, clustering: &Clustering) -> Result<Vec<ClusterStats>> {
    build_cluster_stats_seeded(set, clustering, 0)
}

pub fn build_cluster_stats_seeded(set: &VectorSet, clustering: &Clustering, seed: u64) -> Result<Vec<ClusterStats>> {
    if set.len() != clustering.assignment().len() {
        return Err(Error::InvalidParameter(format!(
            "{} points but {} assignments",
            set.len(),
            clustering.assignment().len()
        )));
    }
    if set.dim() != clustering.dim() {
        return Err(Error::DimensionMismatch {
            expected: clustering.dim(),
            actual: set.dim(),
        });
    }
    let dim = set.dim();
    let members = clustering.members();
    Ok(members
        .par_iter()
        .enumerate()
        .map(|(j, ids)| {
            let mut pts = Vec::with_capacity(ids.len() * dim);
            for &i in ids {
                pts.extend_from_slice(set.row(i as usize));
            }
            stats_for(&pts, dim, clustering.centroid(j), seed.wrapping_add(j as u64))
        })
        .collect())
}

/// Euclidean distance used by all features, independent of the search metric.
#[inline]
pub fn feature_distance(q: &[f32], c: &[f32]) -> f32 {
    l2_squared(q, c).sqrt()
}

/// Query-level features over the `t` nearest clusters: distances, ratios to
/// the nearest, sizes and radii, in that order (`4 t` values).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub values: Vec<f32>,
}

impl QueryFeatures {
    pub fn len_for(t: usize) -> usize {
        4 * t
    }

    /// `ranked` must hold at least `t` clusters, nearest first.
    pub fn compute(
        q: &[f32],
        ranked: &[Neighbor],
        clustering: &Clustering,
        stats: &[ClusterStats],
        t: usize,
    ) -> Result<Self> {
        if ranked.len() < t {
            return Err(Error::NotEnoughPoints {
                requested: t,
                available: ranked.len(),
            });
        }
        let dists: Vec<f32> = ranked[..t]
            .iter()
            .map(|c| feature_distance(q, clustering.centroid(c.id as usize)))
            .collect();
        let nearest = dists[0].max(1e-12);
        let mut values = Vec::with_capacity(4 * t);
        values.extend_from_slice(&dists);
        values.extend(dists.iter().map(|d| d / nearest));
        values.extend(ranked[..t].iter().map(|c| stats[c.id as usize].size as f32));
        values.extend(ranked[..t].iter().map(|c| stats[c.id as usize].radius));
        Ok(Self { values })
    }
}

/// Cluster-level features for the keep/prune decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFeatures {
    pub values: Vec<f32>,
}

impl ClusterFeatures {
    pub const LEN: usize = 8 + HISTOGRAM_BINS;

    /// Layout: `d(q,c)`, `d(q,c) / d(q,c_nearest)`, `|C|`, `radius`,
    /// `|<pc1, q-c>|`, `|<pc2, q-c>|`, outlier count, histogram,
    /// `<outlier direction, (q-c)/|q-c|>`.
    pub fn compute(q: &[f32], centroid: &[f32], nearest_distance: f32, stats: &ClusterStats) -> Self {
        let qc: Vec<f32> = q.iter().zip(centroid).map(|(a, b)| a - b).collect();
        let d = dot(&qc, &qc).sqrt();
        let mut values = Vec::with_capacity(Self::LEN);
        values.push(d);
        values.push(d / nearest_distance.max(1e-12));
        values.push(stats.size as f32);
        values.push(stats.radius);
        values.push(dot(&stats.pc1, &qc).abs());
        values.push(dot(&stats.pc2, &qc).abs());
        values.push(stats.outliers.len() as f32);
        values.extend(stats.histogram.iter().map(|&h| h as f32));
        values.push(if d > 0.0 {
            dot(&stats.outlier_direction, &qc) / d
        } else {
            0.0
        });
        Self { values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_cluster() {
        let s = stats_for(&[1.0, 2.0], 2, &[1.0, 2.0], 0);
        assert_eq!(s.radius, 0.0);
        assert!(s.degenerate);
        assert_eq!(s.histogram.iter().sum::<u32>(), 1);
        assert!(s.pc1.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn segment_principal_direction() {
        let dir = [3.0f32 / 5.0, 4.0 / 5.0, 0.0];
        let mut pts = Vec::new();
        for i in 0..50 {
            let t = i as f32 / 49.0 - 0.5;
            pts.extend(dir.iter().map(|d| d * t * 10.0));
        }
        let s = stats_for(&pts, 3, &[0.0; 3], 5);
        assert!(dot(&s.pc1, &dir).abs() > 1.0 - 1e-2);
        assert_eq!(s.histogram.iter().sum::<u32>(), 50);
    }

    #[test]
    fn cluster_feature_length() {
        let s = stats_for(&[0.0, 0.0, 1.0, 0.0, 0.0, 2.0], 2, &[0.3, 0.6], 1);
        let f = ClusterFeatures::compute(&[2.0, 2.0], &[0.3, 0.6], 1.0, &s);
        assert_eq!(f.values.len(), ClusterFeatures::LEN);
        assert!(f.values.iter().all(|v| v.is_finite()));
    }
}
