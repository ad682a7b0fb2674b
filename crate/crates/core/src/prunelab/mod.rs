//! Experimental within-cluster filtering strategies and their measurement.
//! None of these are used by the default search path.

mod annulus;
mod hull;
mod sign;
mod strips;

pub use annulus::{annulus_filter, AnnulusData, AnnulusFilter};
pub use hull::{hull_filter, hull_scan, hull_vertices, ClusterHull, HullIndex, HullScan, DEFAULT_HULL_RANK};
pub use sign::{orthonormal_directions, sign_filter, SignFilter, SignIndex, DEFAULT_HYPERPLANES, MAX_HYPERPLANES};
pub use strips::{strips_scan, top_direction, ClusterStrips, StripsIndex, StripsScan, DEFAULT_STRIPS};

use std::fmt;

use rayon::prelude::*;

use crate::dataset::{l2_squared, recall_at_k, GroundTruth, Metric, VectorSet};
use crate::engine::{rerank_exact, Index, PointFilter, SearchRequest};
use crate::error::{Error, Result};
use crate::kernels::CandidatePool;
use crate::kmeans::rank_clusters;

/// Which filter to measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabStrategy {
    /// Plain engine search.
    Disabled,
    /// Engine search with the sign filter at a Hamming threshold.
    Sign { threshold: u32 },
    /// Exact scan of probed clusters in strip order.
    Strips,
    /// Exact inner-product scan of probed clusters, vertices first.
    Hull,
    /// Engine search with the annulus filter, bound = exact k-th distance.
    Annulus,
}

impl LabStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            LabStrategy::Disabled => "disabled",
            LabStrategy::Sign { .. } => "sign",
            LabStrategy::Strips => "strips",
            LabStrategy::Hull => "hull",
            LabStrategy::Annulus => "annulus",
        }
    }

    pub fn parameter(&self) -> String {
        match self {
            LabStrategy::Sign { threshold } => threshold.to_string(),
            _ => String::new(),
        }
    }
}

/// Prebuilt filter structures; build only what the measured strategies need.
#[derive(Debug, Clone, Default)]
pub struct Lab {
    pub sign: Option<SignIndex>,
    pub strips: Option<StripsIndex>,
    pub hull: Option<HullIndex>,
    pub annulus: Option<AnnulusData>,
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub strategy: String,
    pub parameter: String,
    pub queries: usize,
    pub k: usize,
    pub nprob: usize,
    pub recall: f64,
    /// Pruned points over points in probed clusters.
    pub pruned_fraction: f64,
    /// Mean points per query in probed clusters.
    pub mean_points_considered: f64,
    /// Mean per-query distance evaluations skipped.
    pub mean_evaluations_avoided: f64,
}

impl PruneReport {
    pub const CSV_HEADER: &'static str =
        "strategy,parameter,queries,k,nprob,recall,pruned_fraction,mean_points_considered,mean_evaluations_avoided";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.1},{:.1}",
            self.strategy,
            self.parameter,
            self.queries,
            self.k,
            self.nprob,
            self.recall,
            self.pruned_fraction,
            self.mean_points_considered,
            self.mean_evaluations_avoided
        )
    }
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9} {:>5}  recall {:.4}  pruned {:>6.2}%  considered {:>8.1}  avoided {:>8.1}",
            self.strategy,
            self.parameter,
            self.recall,
            100.0 * self.pruned_fraction,
            self.mean_points_considered,
            self.mean_evaluations_avoided
        )
    }
}

/// CSV document (header plus one row per report).
pub fn reports_csv(reports: &[PruneReport]) -> String {
    let mut s = String::from(PruneReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

struct QueryOutcome {
    ids: Vec<u32>,
    considered: usize,
    pruned: usize,
}

fn engine_outcome(
    index: &Index,
    q: &[f32],
    req: &SearchRequest,
    filter: Option<&dyn PointFilter>,
) -> Result<QueryOutcome> {
    let r = index.search_with_filter(q, req, filter)?;
    Ok(QueryOutcome {
        ids: r.ids(),
        considered: r.diagnostics.points_scanned,
        pruned: r.diagnostics.points_filtered,
    })
}

fn exact_outcome(
    index: &Index,
    lab: &Lab,
    strategy: LabStrategy,
    q: &[f32],
    req: &SearchRequest,
) -> Result<QueryOutcome> {
    let qw = index.working_query(q)?;
    let working = lab_working(index)?;
    let ranked = rank_clusters(
        &qw,
        index.clustering(),
        req.nprob.min(index.num_clusters()),
        index.metric(),
    )?;
    let mut pool = CandidatePool::new(req.k);
    let (mut considered, mut evaluated) = (0, 0);
    for c in &ranked {
        let j = c.id as usize;
        considered += index.members(j).len();
        evaluated += match strategy {
            LabStrategy::Strips => {
                let s = lab.strips.as_ref().ok_or(Error::MissingComponent("strips index"))?;
                strips_scan(&qw, j, s, working, &mut pool).evaluated
            }
            _ => {
                let h = lab.hull.as_ref().ok_or(Error::MissingComponent("hull index"))?;
                hull_scan(&qw, j, h, working, &mut pool)?.evaluated
            }
        };
    }
    let cands = pool.into_sorted();
    Ok(QueryOutcome {
        ids: rerank_exact(&cands, q, index.vectors(), req.k)
            .iter()
            .map(|n| n.id)
            .collect(),
        considered,
        pruned: considered - evaluated,
    })
}

// The exact scans need working-space rows; without filtration or
// normalization those are the stored vectors themselves.
fn lab_working(index: &Index) -> Result<&VectorSet> {
    if index.filter().is_some() || index.metric() == Metric::Angular {
        return Err(Error::InvalidParameter(
            "strips and hull scans need an unfiltered L2 or inner-product index".into(),
        ));
    }
    Ok(index.vectors())
}

/// Runs `strategy` over all queries with `req` (its `nprob` and `k`; the
/// engine strategies also use `reorder`) and reports recall and pruning.
pub fn measure_prune_stats(
    index: &Index,
    lab: &Lab,
    strategy: LabStrategy,
    queries: &VectorSet,
    truth: &GroundTruth,
    req: &SearchRequest,
) -> Result<PruneReport> {
    if truth.len() < queries.len() {
        return Err(Error::MissingGroundTruth {
            requested: queries.len(),
            available: truth.len(),
        });
    }
    match strategy {
        LabStrategy::Strips if index.metric() == Metric::InnerProduct => {
            return Err(Error::InvalidParameter("strips scan ranks by L2".into()))
        }
        LabStrategy::Hull if index.metric() != Metric::InnerProduct => {
            return Err(Error::InvalidParameter(
                "hull filtering requires the inner-product metric".into(),
            ))
        }
        LabStrategy::Annulus if index.metric() != Metric::L2 => {
            return Err(Error::InvalidParameter(
                "annulus filtering requires the L2 metric".into(),
            ))
        }
        LabStrategy::Annulus if truth.k < req.k => {
            return Err(Error::InvalidParameter("ground truth is shallower than k".into()))
        }
        _ => {}
    }
    let outcomes: Vec<QueryOutcome> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            match strategy {
                LabStrategy::Disabled => engine_outcome(index, q, req, None),
                LabStrategy::Sign { threshold } => {
                    let index_s = lab.sign.as_ref().ok_or(Error::MissingComponent("sign index"))?;
                    engine_outcome(
                        index,
                        q,
                        req,
                        Some(&SignFilter {
                            index: index_s,
                            threshold,
                        }),
                    )
                }
                LabStrategy::Annulus => {
                    let data = lab.annulus.as_ref().ok_or(Error::MissingComponent("annulus data"))?;
                    let kth = truth.neighbors[qi][req.k - 1].id as usize;
                    let ub = (l2_squared(q, index.vectors().row(kth)) as f64).sqrt();
                    engine_outcome(index, q, req, Some(&AnnulusFilter { data, ub }))
                }
                LabStrategy::Strips | LabStrategy::Hull => exact_outcome(index, lab, strategy, q, req),
            }
        })
        .collect::<Result<_>>()?;
    let ids: Vec<Vec<u32>> = outcomes.iter().map(|o| o.ids.clone()).collect();
    let considered: usize = outcomes.iter().map(|o| o.considered).sum();
    let pruned: usize = outcomes.iter().map(|o| o.pruned).sum();
    let nq = queries.len().max(1) as f64;
    Ok(PruneReport {
        strategy: strategy.name().to_string(),
        parameter: strategy.parameter(),
        queries: queries.len(),
        k: req.k,
        nprob: req.nprob,
        recall: recall_at_k(&ids, truth, req.k),
        pruned_fraction: if considered == 0 {
            0.0
        } else {
            pruned as f64 / considered as f64
        },
        mean_points_considered: considered as f64 / nq,
        mean_evaluations_avoided: pruned as f64 / nq,
    })
}

/// Baseline row followed by one sign-filter row per threshold.
pub fn sign_sweep(
    index: &Index,
    lab: &Lab,
    queries: &VectorSet,
    truth: &GroundTruth,
    req: &SearchRequest,
    thresholds: &[u32],
) -> Result<Vec<PruneReport>> {
    let mut rows = vec![measure_prune_stats(
        index,
        lab,
        LabStrategy::Disabled,
        queries,
        truth,
        req,
    )?];
    for &t in thresholds {
        rows.push(measure_prune_stats(
            index,
            lab,
            LabStrategy::Sign { threshold: t },
            queries,
            truth,
            req,
        )?);
    }
    Ok(rows)
}

/// The row pruning the most while keeping `recall >= target`.
pub fn best_operating_point(reports: &[PruneReport], target: f64) -> Option<&PruneReport> {
    reports
        .iter()
        .filter(|r| r.recall >= target)
        .max_by(|a, b| a.pruned_fraction.total_cmp(&b.pruned_fraction))
}
