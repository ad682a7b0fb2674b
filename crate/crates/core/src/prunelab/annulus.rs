//! Triangle-inequality (spherical annulus) filtering.

use crate::dataset::{Metric, VectorSet};
use crate::engine::{Index, PointFilter};
use crate::error::{Error, Result};

/// Centroid-to-point distances, per cluster in member order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusData {
    dim: usize,
    centroids: Vec<f32>,
    radii: Vec<Vec<f64>>,
}

fn dist64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl AnnulusData {
    pub fn build(points: &VectorSet, centroids: &[f32], members: &[Vec<u32>]) -> Result<Self> {
        let dim = points.dim();
        if centroids.len() != members.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: members.len() * dim,
                actual: centroids.len(),
            });
        }
        let radii = members
            .iter()
            .enumerate()
            .map(|(j, ids)| {
                let c = &centroids[j * dim..(j + 1) * dim];
                ids.iter().map(|&i| dist64(points.row(i as usize), c)).collect()
            })
            .collect();
        Ok(Self {
            dim,
            centroids: centroids.to_vec(),
            radii,
        })
    }

    /// Builds over the index's working space. L2 indexes only.
    pub fn for_index(index: &Index) -> Result<Self> {
        if index.metric() != Metric::L2 {
            return Err(Error::InvalidParameter(
                "annulus filtering requires the L2 metric".into(),
            ));
        }
        let members: Vec<Vec<u32>> = (0..index.num_clusters()).map(|j| index.members(j).to_vec()).collect();
        Self::build(&index.working_vectors()?, index.clustering().centroids(), &members)
    }

    pub fn radii(&self, cluster: usize) -> &[f64] {
        &self.radii[cluster]
    }

    pub fn num_clusters(&self) -> usize {
        self.radii.len()
    }

    /// Distance from `q` to `cluster`'s centroid.
    pub fn query_distance(&self, cluster: usize, q: &[f32]) -> f64 {
        dist64(q, &self.centroids[cluster * self.dim..(cluster + 1) * self.dim])
    }
}

/// Keeps `x` iff `d_qc - ub <= d(c, x) <= d_qc + ub` (true, non-squared distances).
pub fn annulus_filter(d_qc: f64, ub: f64, radii: &[f64]) -> Result<Vec<bool>> {
    if ub.is_nan() || ub < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "annulus bound must be non-negative, got {ub}"
        )));
    }
    Ok(radii.iter().map(|&r| r >= d_qc - ub && r <= d_qc + ub).collect())
}

/// [`annulus_filter`] with a fixed bound as an engine point filter.
#[derive(Debug, Clone, Copy)]
pub struct AnnulusFilter<'a> {
    pub data: &'a AnnulusData,
    pub ub: f64,
}

impl PointFilter for AnnulusFilter<'_> {
    fn keep_mask(&self, cluster: usize, q: &[f32]) -> Option<Vec<bool>> {
        if self.ub.is_infinite() {
            return None;
        }
        annulus_filter(self.data.query_distance(cluster, q), self.ub, &self.data.radii[cluster]).ok()
    }
}
