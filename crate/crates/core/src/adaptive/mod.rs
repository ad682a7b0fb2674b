//! Learned per-query search scope: how many clusters to probe, how many
//! candidates to re-rank, and which probed clusters to skip.

pub mod features;
pub mod gbdt;
mod train;

pub use features::{
    build_cluster_stats, build_cluster_stats_seeded, feature_distance, ClusterFeatures, ClusterStats, QueryFeatures,
    DEFAULT_FEATURE_CENTROIDS, HISTOGRAM_BINS,
};
pub use gbdt::{auc, log_loss, train_prob_model, GbdtParams, ProbModel};
pub use train::{make_labels, make_prune_labels, make_reorder_labels, train_models, TrainParams};

use crate::error::{Error, Result};

pub const DEFAULT_P0: f32 = 0.1;
pub const DEFAULT_P1: f32 = 0.2;
pub const DEFAULT_THETA: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveParams {
    pub nprob_min: usize,
    pub nprob_max: usize,
    pub p0: f32,
    pub p1: f32,
    pub reorder_min: usize,
    pub reorder_max: usize,
    pub p0_reorder: f32,
    pub p1_reorder: f32,
    /// Clusters whose keep probability is not above `theta` are skipped.
    pub theta: f32,
}

impl AdaptiveParams {
    pub fn new(nprob_min: usize, nprob_max: usize, reorder_min: usize, reorder_max: usize) -> Self {
        Self {
            nprob_min,
            nprob_max,
            p0: DEFAULT_P0,
            p1: DEFAULT_P1,
            reorder_min,
            reorder_max,
            p0_reorder: DEFAULT_P0,
            p1_reorder: DEFAULT_P1,
            theta: DEFAULT_THETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.nprob_min == 0 || self.nprob_min > self.nprob_max {
            return bad(format!(
                "need 1 <= nprob_min <= nprob_max, got {}..{}",
                self.nprob_min, self.nprob_max
            ));
        }
        if self.reorder_min == 0 || self.reorder_min > self.reorder_max {
            return bad(format!(
                "need 1 <= reorder_min <= reorder_max, got {}..{}",
                self.reorder_min, self.reorder_max
            ));
        }
        for (name, p) in [
            ("p0", self.p0),
            ("p1", self.p1),
            ("p0_reorder", self.p0_reorder),
            ("p1_reorder", self.p1_reorder),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        validate_theta(self.theta)
    }
}

/// `theta = 1` would prune every cluster and is rejected.
pub fn validate_theta(theta: f32) -> Result<()> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidParameter(format!(
            "prune threshold must be in [0, 1), got {theta}"
        )));
    }
    Ok(())
}

/// `min(max, round(min + (max - min) * relu(p - p0) * (p + p1)))`.
pub fn interpolate(p: f32, min: usize, max: usize, p0: f32, p1: f32) -> usize {
    let delta = max.saturating_sub(min) as f64;
    let p = p.clamp(0.0, 1.0) as f64;
    let relu = (p - p0 as f64).max(0.0);
    let v = (min as f64 + delta * relu * (p + p1 as f64)).round();
    (v as usize).clamp(min, max.max(min))
}

pub fn interpolate_nprob(p: f32, params: &AdaptiveParams) -> usize {
    interpolate(p, params.nprob_min, params.nprob_max, params.p0, params.p1)
}

pub fn interpolate_reorder(p: f32, params: &AdaptiveParams) -> usize {
    interpolate(
        p,
        params.reorder_min,
        params.reorder_max,
        params.p0_reorder,
        params.p1_reorder,
    )
}

/// Keep a cluster iff the predicted probability that it holds a true
/// neighbor exceeds `theta`. `theta = 0` keeps everything.
pub fn predict_keep(features: &ClusterFeatures, model: &ProbModel, theta: f32) -> Result<bool> {
    if features.values.len() != model.n_features() {
        return Err(Error::SchemaMismatch {
            expected: model.n_features(),
            actual: features.values.len(),
        });
    }
    validate_theta(theta)?;
    if theta == 0.0 {
        return Ok(true);
    }
    Ok(model.predict(&features.values)? > theta)
}

/// Trained predictors plus the parameters they were trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveModels {
    pub params: AdaptiveParams,
    /// Number of nearest clusters summarized in query features.
    pub t: usize,
    /// Neighbor count the labels were generated for.
    pub k: usize,
    /// Probability that a query is hard (needs more than `nprob_min` clusters).
    pub nprob: Option<ProbModel>,
    /// Probability that `reorder_min` candidates are not enough.
    pub reorder: Option<ProbModel>,
    /// Probability that a cluster holds at least one true neighbor.
    pub prune: Option<ProbModel>,
}
