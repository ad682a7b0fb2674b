//! Drops dimensions whose components are mostly zero or close to the mean.

use rayon::prelude::*;

use crate::dataset::VectorSet;
use crate::error::{Error, Result};

pub const DEFAULT_FILTER_THRESHOLD: f32 = 0.90;
pub const DEFAULT_MIN_DIMS: usize = 8;

/// Per dimension, the fraction of components that are exactly zero or lie
/// within one population standard deviation of the mean (inclusive).
pub fn compute_dim_stats(set: &VectorSet) -> Result<Vec<f32>> {
    let n = set.len();
    if n < 2 {
        return Err(Error::NotEnoughPoints {
            requested: 2,
            available: n,
        });
    }
    let d = set.dim();
    let data = set.as_slice();
    Ok((0..d)
        .into_par_iter()
        .map(|j| {
            let column = || data[j..].iter().step_by(d).map(|&v| v as f64);
            let mean = column().sum::<f64>() / n as f64;
            let var = column().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sigma = var.sqrt();
            let hits = column().filter(|&v| v == 0.0 || (v - mean).abs() <= sigma).count();
            (hits as f64 / n as f64) as f32
        })
        .collect())
}

/// Keep mask over the original dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DimFilter {
    mask: Vec<bool>,
    fractions: Vec<f32>,
    threshold: f32,
    kept: Vec<usize>,
}

impl DimFilter {
    /// Keeps every dimension.
    pub fn identity(dim: usize) -> Self {
        Self {
            mask: vec![true; dim],
            fractions: vec![0.0; dim],
            threshold: 1.0,
            kept: (0..dim).collect(),
        }
    }

    pub(crate) fn from_parts(mask: Vec<bool>, fractions: Vec<f32>, threshold: f32) -> Result<Self> {
        if mask.len() != fractions.len() || !mask.iter().any(|&k| k) {
            return Err(Error::InvalidParameter("malformed dimension mask".into()));
        }
        let kept = mask.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect();
        Ok(Self {
            mask,
            fractions,
            threshold,
            kept,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn fractions(&self) -> &[f32] {
        &self.fractions
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn kept_dims(&self) -> &[usize] {
        &self.kept
    }

    pub fn d_original(&self) -> usize {
        self.mask.len()
    }

    pub fn d_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn pruned_count(&self) -> usize {
        self.d_original() - self.d_kept()
    }

    pub fn is_identity(&self) -> bool {
        self.d_kept() == self.d_original()
    }

    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.d_original() {
            return Err(Error::DimensionMismatch {
                expected: self.d_original(),
                actual: v.len(),
            });
        }
        Ok(self.kept.iter().map(|&j| v[j]).collect())
    }

    pub fn apply_set(&self, set: &VectorSet) -> Result<VectorSet> {
        if set.dim() != self.d_original() && !set.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.d_original(),
                actual: set.dim(),
            });
        }
        let mut data = Vec::with_capacity(set.len() * self.d_kept());
        for row in set.rows() {
            data.extend(self.kept.iter().map(|&j| row[j]));
        }
        VectorSet::new(self.d_kept(), set.metric(), data)
    }
}

/// Keeps dimension `j` iff `fractions[j] <= threshold`. If nothing would
/// survive, the `DEFAULT_MIN_DIMS` lowest-fraction dimensions are kept.
pub fn select_dims(fractions: &[f32], threshold: f32) -> Result<DimFilter> {
    select_dims_with_min(fractions, threshold, DEFAULT_MIN_DIMS)
}

pub fn select_dims_with_min(fractions: &[f32], threshold: f32, d_min: usize) -> Result<DimFilter> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "filter threshold must be in (0, 1], got {threshold}"
        )));
    }
    if fractions.is_empty() {
        return Err(Error::InvalidParameter("no dimensions to filter".into()));
    }
    let mut mask: Vec<bool> = fractions.iter().map(|&f| f <= threshold).collect();
    if !mask.iter().any(|&k| k) {
        let mut order: Vec<usize> = (0..fractions.len()).collect();
        order.sort_by(|&a, &b| fractions[a].total_cmp(&fractions[b]).then(a.cmp(&b)));
        for &j in order.iter().take(d_min.max(1)) {
            mask[j] = true;
        }
    }
    DimFilter::from_parts(mask, fractions.to_vec(), threshold)
}
