//! Label generation and predictor fitting on a set of training queries.

use rayon::prelude::*;

use super::features::{feature_distance, ClusterFeatures, QueryFeatures, DEFAULT_FEATURE_CENTROIDS};
use super::gbdt::{train_prob_model, GbdtParams};
use super::{AdaptiveModels, AdaptiveParams};
use crate::dataset::{GroundTruth, VectorSet};
use crate::engine::{Index, SearchRequest};
use crate::error::{Error, Result};
use crate::kmeans::rank_clusters;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    /// Neighbors per query the labels are defined for.
    pub k: usize,
    pub adaptive: AdaptiveParams,
    /// Nearest clusters summarized in query features.
    pub t: usize,
    pub gbdt: GbdtParams,
    pub seed: u64,
    pub nprob_model: bool,
    pub reorder_model: bool,
    pub prune_model: bool,
    /// Cap on the queries used to generate (query, cluster) prune samples.
    pub prune_queries: usize,
}

impl TrainParams {
    pub fn new(k: usize, adaptive: AdaptiveParams) -> Self {
        Self {
            k,
            adaptive,
            t: DEFAULT_FEATURE_CENTROIDS,
            gbdt: GbdtParams::default(),
            seed: 0,
            nprob_model: true,
            reorder_model: true,
            prune_model: true,
            prune_queries: 2000,
        }
    }
}

fn check_truth(queries: &VectorSet, truth: &GroundTruth, k: usize) -> Result<()> {
    if truth.len() < queries.len() {
        return Err(Error::MissingGroundTruth {
            requested: queries.len(),
            available: truth.len(),
        });
    }
    if truth.k < k || truth.neighbors.iter().take(queries.len()).any(|r| r.len() < k) {
        return Err(Error::InvalidParameter(format!(
            "ground truth holds {} neighbors per query, {k} needed",
            truth.k
        )));
    }
    Ok(())
}

/// `true` (easy) iff all `k` true neighbors of the query lie in its
/// `nprob_min` nearest clusters.
pub fn make_labels(
    index: &Index,
    queries: &VectorSet,
    truth: &GroundTruth,
    nprob_min: usize,
    k: usize,
) -> Result<Vec<bool>> {
    check_truth(queries, truth, k)?;
    let assignment = index.clustering().assignment();
    (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let qw = index.working_query(queries.row(i))?;
            let top = rank_clusters(
                &qw,
                index.clustering(),
                nprob_min.min(index.num_clusters()),
                index.metric(),
            )?;
            Ok(truth
                .ids(i)
                .take(k)
                .all(|id| top.iter().any(|c| c.id == assignment[id as usize])))
        })
        .collect()
}

/// `true` (hard) iff a search probing `nprob_max` clusters with a pool of
/// `reorder_min` misses one of the true top `k`.
pub fn make_reorder_labels(
    index: &Index,
    queries: &VectorSet,
    truth: &GroundTruth,
    params: &AdaptiveParams,
    k: usize,
) -> Result<Vec<bool>> {
    check_truth(queries, truth, k)?;
    let req = SearchRequest::new(k, params.nprob_max.min(index.num_clusters()), params.reorder_min.max(k));
    (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let found = index.search(queries.row(i), &req)?.ids();
            Ok(!truth.ids(i).take(k).all(|id| found.contains(&id)))
        })
        .collect()
}

/// Cluster features and labels for the `nprob_max` nearest clusters of every
/// query; the label is `true` iff the cluster holds at least one true neighbor.
pub fn make_prune_labels(
    index: &Index,
    queries: &VectorSet,
    truth: &GroundTruth,
    nprob_max: usize,
    k: usize,
) -> Result<(Vec<f32>, Vec<bool>)> {
    check_truth(queries, truth, k)?;
    let stats = index.stats().ok_or(Error::MissingComponent("cluster statistics"))?;
    let assignment = index.clustering().assignment();
    let per_query: Vec<Result<(Vec<f32>, Vec<bool>)>> = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let qw = index.working_query(queries.row(i))?;
            let ranked = rank_clusters(
                &qw,
                index.clustering(),
                nprob_max.min(index.num_clusters()),
                index.metric(),
            )?;
            let nearest = feature_distance(&qw, index.clustering().centroid(ranked[0].id as usize));
            let mut feats = Vec::with_capacity(ranked.len() * ClusterFeatures::LEN);
            let mut labels = Vec::with_capacity(ranked.len());
            for c in &ranked {
                let j = c.id as usize;
                feats.extend(ClusterFeatures::compute(&qw, index.clustering().centroid(j), nearest, &stats[j]).values);
                labels.push(truth.ids(i).take(k).any(|id| assignment[id as usize] == c.id));
            }
            Ok((feats, labels))
        })
        .collect();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for r in per_query {
        let (f, l) = r?;
        feats.extend(f);
        labels.extend(l);
    }
    Ok((feats, labels))
}

fn query_features(index: &Index, queries: &VectorSet, t: usize) -> Result<Vec<f32>> {
    let stats = index.stats().ok_or(Error::MissingComponent("cluster statistics"))?;
    let rows: Vec<Result<Vec<f32>>> = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let qw = index.working_query(queries.row(i))?;
            let ranked = rank_clusters(&qw, index.clustering(), t, index.metric())?;
            Ok(QueryFeatures::compute(&qw, &ranked, index.clustering(), stats, t)?.values)
        })
        .collect();
    let mut out = Vec::with_capacity(queries.len() * QueryFeatures::len_for(t));
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Generates labels on `queries` and fits the requested predictors.
/// The index must carry cluster statistics.
pub fn train_models(
    index: &Index,
    queries: &VectorSet,
    truth: &GroundTruth,
    params: &TrainParams,
) -> Result<AdaptiveModels> {
    params.adaptive.validate()?;
    let l = index.num_clusters();
    if params.adaptive.nprob_max > l {
        return Err(Error::InvalidParameter(format!(
            "nprob_max ({}) exceeds the cluster count ({l})",
            params.adaptive.nprob_max
        )));
    }
    if queries.len() < 50 {
        return Err(Error::NotEnoughPoints {
            requested: 50,
            available: queries.len(),
        });
    }
    check_truth(queries, truth, params.k)?;
    let t = params.t.clamp(1, l);
    let needs_query_features = params.nprob_model || params.reorder_model;
    let qf = if needs_query_features {
        query_features(index, queries, t)?
    } else {
        Vec::new()
    };
    let nprob = if params.nprob_model {
        let easy = make_labels(index, queries, truth, params.adaptive.nprob_min, params.k)?;
        let hard: Vec<bool> = easy.iter().map(|&e| !e).collect();
        Some(train_prob_model(&qf, &hard, &params.gbdt, params.seed)?)
    } else {
        None
    };
    let reorder = if params.reorder_model {
        let hard = make_reorder_labels(index, queries, truth, &params.adaptive, params.k)?;
        Some(train_prob_model(&qf, &hard, &params.gbdt, params.seed.wrapping_add(1))?)
    } else {
        None
    };
    let prune = if params.prune_model {
        let n = queries.len().min(params.prune_queries.max(50));
        let ids: Vec<usize> = (0..n).collect();
        let sub = queries.select(&ids);
        let (feats, labels) = make_prune_labels(index, &sub, truth, params.adaptive.nprob_max, params.k)?;
        Some(train_prob_model(
            &feats,
            &labels,
            &params.gbdt,
            params.seed.wrapping_add(2),
        )?)
    } else {
        None
    };
    Ok(AdaptiveModels {
        params: params.adaptive,
        t,
        k: params.k,
        nprob,
        reorder,
        prune,
    })
}
