use rayon::prelude::*;

use super::Index;
use crate::adaptive::{
    feature_distance, interpolate_nprob, interpolate_reorder, predict_keep, validate_theta, AdaptiveParams,
    ClusterFeatures, QueryFeatures,
};
use crate::dataset::{dot, select_topk, Metric, Neighbor, VectorSet};
use crate::error::{Error, Result};
use crate::kernels::{update_pool_masked, CandidatePool, Kernel};
use crate::kmeans::rank_clusters;
use crate::leafgraph::{choose_strategy, graph_search, should_escalate, HybridPolicy, Strategy};
use crate::lut::{compute_float_lut, quantize_lut, QuantizedLut};
use crate::pq::{ResidualMode, BLOCK_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRequest {
    pub k: usize,
    /// Clusters to probe (the initial selection when `adaptive` is on).
    pub nprob: usize,
    /// Candidate pool size handed to exact re-ranking.
    pub reorder: usize,
    /// Predict `nprob` and `reorder` per query with the trained models.
    pub adaptive: bool,
    /// Skip probed clusters whose keep probability is not above this.
    pub prune_theta: Option<f32>,
    /// Graph/brute-force mix; `None` scans every probed cluster in full.
    pub hybrid: Option<HybridPolicy>,
    /// Kernel override; `None` picks the fastest available one.
    pub kernel: Option<Kernel>,
    /// Overrides the interpolation parameters stored with the models.
    pub adaptive_params: Option<AdaptiveParams>,
}

impl SearchRequest {
    pub fn new(k: usize, nprob: usize, reorder: usize) -> Self {
        Self {
            k,
            nprob,
            reorder,
            adaptive: false,
            prune_theta: None,
            hybrid: None,
            kernel: None,
            adaptive_params: None,
        }
    }

    /// Probes every cluster and re-ranks every point.
    pub fn exhaustive(index: &Index, k: usize) -> Self {
        Self::new(k, index.num_clusters(), index.len())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchDiagnostics {
    /// Clusters actually searched.
    pub clusters_probed: usize,
    pub clusters_pruned: usize,
    /// Distance evaluations: valid block slots scanned plus graph evaluations.
    pub points_scanned: usize,
    /// Scanned points dropped by a point filter.
    pub points_filtered: usize,
    pub graph_clusters: usize,
    pub graph_evaluations: usize,
    pub escalations: usize,
    pub nprob_used: usize,
    pub reorder_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Exact distances in the original space, ascending, ties by id.
    pub neighbors: Vec<Neighbor>,
    pub diagnostics: SearchDiagnostics,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<u32> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

/// Per-cluster point filter plugged into block scans.
pub trait PointFilter: Sync {
    /// Keep mask over `cluster`'s members in ascending id order, or `None`
    /// to keep every point. `q` is the query in the working space.
    fn keep_mask(&self, cluster: usize, q: &[f32]) -> Option<Vec<bool>>;
}

/// How one cluster is searched.
#[derive(Debug, Clone, Copy)]
pub struct ClusterScan<'a> {
    pub strategy: Strategy,
    pub efs: usize,
    pub escalate_fraction: f32,
    pub kernel: Kernel,
    pub keep: Option<&'a [bool]>,
}

impl ClusterScan<'_> {
    pub fn brute_force(kernel: Kernel) -> Self {
        ClusterScan {
            strategy: Strategy::BruteForce,
            efs: 0,
            escalate_fraction: 1.0,
            kernel,
            keep: None,
        }
    }
}

fn scan_blocks(
    pool: &mut CandidatePool,
    index: &Index,
    cluster: usize,
    qlut: &QuantizedLut,
    scan: &ClusterScan,
    diag: &mut SearchDiagnostics,
) {
    for (b, block) in index.blocks(cluster).iter().enumerate() {
        let d = scan.kernel.distances(qlut, block);
        let valid = block.valid_count();
        let keep = scan.keep.map(|k| &k[b * BLOCK_SIZE..b * BLOCK_SIZE + valid]);
        update_pool_masked(pool, &d, block.ids(), qlut, keep);
        diag.points_scanned += valid;
        if let Some(k) = keep {
            diag.points_filtered += k.iter().filter(|&&x| !x).count();
        }
    }
}

/// Searches one probed cluster into `pool`: a block scan, or a graph search
/// that escalates to a full block scan when it looks promising.
pub fn search_in_cluster(
    pool: &mut CandidatePool,
    index: &Index,
    cluster: usize,
    qlut: &QuantizedLut,
    scan: &ClusterScan,
    diag: &mut SearchDiagnostics,
) {
    if index.blocks(cluster).is_empty() {
        return;
    }
    let graph = match (scan.strategy, index.graphs()) {
        (Strategy::Graph, Some(g)) => &g[cluster],
        _ => return scan_blocks(pool, index, cluster, qlut, scan, diag),
    };
    let out = graph_search(graph, index.blocks(cluster), qlut, scan.efs, &scan.kernel);
    diag.graph_clusters += 1;
    diag.graph_evaluations += out.evaluations;
    diag.points_scanned += out.evaluations;
    if should_escalate(&out.candidates, pool.worst(), scan.efs, scan.escalate_fraction) {
        diag.escalations += 1;
        scan_blocks(pool, index, cluster, qlut, scan, diag);
        return;
    }
    let members = index.members(cluster);
    for c in out.candidates {
        if let Some(k) = scan.keep {
            // Members are ascending, so the local position is a binary search away.
            if let Ok(pos) = members.binary_search(&c.id) {
                if !k[pos] {
                    diag.points_filtered += 1;
                    continue;
                }
            }
        }
        pool.push(c);
    }
}

/// Exact distances for the (deduplicated) candidate ids, top `k`.
pub fn rerank_exact(candidates: &[Neighbor], q: &[f32], vectors: &VectorSet, k: usize) -> Vec<Neighbor> {
    let mut ids: Vec<u32> = candidates.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let metric = vectors.metric();
    let all = ids
        .into_iter()
        .map(|id| Neighbor {
            id,
            distance: metric.score(q, vectors.row(id as usize)),
        })
        .collect();
    select_topk(all, k)
}

impl Index {
    fn validate_request(&self, q: &[f32], req: &SearchRequest) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: q.len(),
            });
        }
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if req.k == 0 {
            return bad("k must be at least 1".into());
        }
        if req.k > self.len() {
            return Err(Error::NotEnoughPoints {
                requested: req.k,
                available: self.len(),
            });
        }
        if req.k > req.reorder {
            return bad(format!("k ({}) exceeds reorder ({})", req.k, req.reorder));
        }
        if req.nprob == 0 || req.nprob > self.num_clusters() {
            return bad(format!(
                "nprob must be in 1..={}, got {}",
                self.num_clusters(),
                req.nprob
            ));
        }
        if let Some(t) = req.prune_theta {
            validate_theta(t)?;
        }
        if let Some(h) = &req.hybrid {
            h.validate(req.k)?;
            if h.brute_force_clusters != usize::MAX && self.graphs.is_none() {
                return Err(Error::MissingComponent("leaf graphs"));
            }
        }
        if let Some(p) = &req.adaptive_params {
            p.validate()?;
        }
        Ok(())
    }

    /// LUT for the residuals of `cluster`. Inner-product tables do not
    /// depend on the cluster, only their offset does, so `shared` is reused.
    fn cluster_lut<'a>(
        &self,
        qw: &[f32],
        cluster: usize,
        shared: &'a mut Option<QuantizedLut>,
        own: &'a mut Option<QuantizedLut>,
    ) -> Result<&'a QuantizedLut> {
        let reference = self.residual_mode().reference(&self.clustering, cluster);
        let metric = self.metric();
        if metric == Metric::InnerProduct || self.residual_mode() == ResidualMode::None {
            if shared.is_none() {
                let pq_metric = crate::pq::pq_metric(metric);
                *shared = Some(quantize_lut(&compute_float_lut(qw, &self.codebooks, pq_metric)?));
            }
            let lut = shared.as_mut().unwrap();
            if metric == Metric::InnerProduct {
                lut.set_offset(reference.map_or(0.0, |c| -dot(qw, c)));
            }
            return Ok(lut);
        }
        let c = reference.expect("residual mode has a reference centroid");
        let q_res: Vec<f32> = qw.iter().zip(c).map(|(a, b)| a - b).collect();
        *own = Some(quantize_lut(&compute_float_lut(&q_res, &self.codebooks, Metric::L2)?));
        Ok(own.as_ref().unwrap())
    }

    pub fn search(&self, q: &[f32], req: &SearchRequest) -> Result<SearchResult> {
        self.search_with_filter(q, req, None)
    }

    /// [`Index::search`] with an optional point filter applied inside block scans.
    pub fn search_with_filter(
        &self,
        q: &[f32],
        req: &SearchRequest,
        filter: Option<&dyn PointFilter>,
    ) -> Result<SearchResult> {
        self.validate_request(q, req)?;
        let qw = self.working_query(q)?;
        let l = self.num_clusters();
        let prune_theta = req.prune_theta.filter(|&t| t > 0.0);
        let models = if req.adaptive || prune_theta.is_some() {
            Some(self.models.as_ref().ok_or(Error::MissingComponent("adaptive models"))?)
        } else {
            None
        };
        let stats = if models.is_some() {
            Some(
                self.stats
                    .as_deref()
                    .ok_or(Error::MissingComponent("cluster statistics"))?,
            )
        } else {
            None
        };
        let params = models.map(|m| req.adaptive_params.unwrap_or(m.params));

        let mut ranked_n = req.nprob;
        if req.adaptive {
            let (m, p) = (models.unwrap(), params.unwrap());
            ranked_n = ranked_n.max(p.nprob_max).max(m.t);
        }
        let ranked = rank_clusters(&qw, &self.clustering, ranked_n.min(l), self.metric())?;

        let mut nprob = req.nprob;
        let mut reorder = req.reorder;
        if req.adaptive {
            let (m, p) = (models.unwrap(), params.unwrap());
            let qf = QueryFeatures::compute(&qw, &ranked, &self.clustering, stats.unwrap(), m.t)?;
            if let Some(model) = &m.nprob {
                nprob = interpolate_nprob(model.predict(&qf.values)?, &p).clamp(1, l);
            }
            if let Some(model) = &m.reorder {
                reorder = interpolate_reorder(model.predict(&qf.values)?, &p).max(req.k);
            }
        }
        let prune = match prune_theta {
            Some(theta) => {
                let model = models
                    .unwrap()
                    .prune
                    .as_ref()
                    .ok_or(Error::MissingComponent("prune model"))?;
                let nearest = feature_distance(&qw, self.clustering.centroid(ranked[0].id as usize));
                Some((model, theta, nearest))
            }
            None => None,
        };

        let kernel = req.kernel.unwrap_or_else(|| Kernel::probe(None));
        let hybrid = req.hybrid.unwrap_or_else(HybridPolicy::brute_force_only);
        let efs = hybrid.efs_for(req.k);
        let mut diag = SearchDiagnostics {
            nprob_used: nprob,
            reorder_used: reorder,
            ..Default::default()
        };
        let mut pool = CandidatePool::new(reorder);
        let mut shared = None;
        let mut own = None;
        for (rank, c) in ranked.iter().take(nprob).enumerate() {
            let cluster = c.id as usize;
            if let Some((model, theta, nearest)) = prune {
                let cf = ClusterFeatures::compute(
                    &qw,
                    self.clustering.centroid(cluster),
                    nearest,
                    &stats.unwrap()[cluster],
                );
                if !predict_keep(&cf, model, theta)? {
                    diag.clusters_pruned += 1;
                    continue;
                }
            }
            diag.clusters_probed += 1;
            let mask = filter.and_then(|f| f.keep_mask(cluster, &qw));
            let scan = ClusterScan {
                strategy: choose_strategy(rank, &hybrid),
                efs,
                escalate_fraction: hybrid.escalate_fraction,
                kernel,
                keep: mask.as_deref(),
            };
            let qlut = self.cluster_lut(&qw, cluster, &mut shared, &mut own)?;
            search_in_cluster(&mut pool, self, cluster, qlut, &scan, &mut diag);
        }
        let candidates = pool.into_sorted();
        Ok(SearchResult {
            neighbors: rerank_exact(&candidates, q, &self.original, req.k),
            diagnostics: diag,
        })
    }

    /// Searches every row of `queries` (in parallel; results in query order).
    pub fn search_batch(&self, queries: &VectorSet, req: &SearchRequest) -> Result<Vec<SearchResult>> {
        (0..queries.len())
            .into_par_iter()
            .map(|i| self.search(queries.row(i), req))
            .collect()
    }
}
