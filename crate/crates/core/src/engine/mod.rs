//! Index construction, search orchestration and persistence.

mod persist;
mod search;

pub use persist::{load_index, save_index, FORMAT_VERSION, MAGIC};
pub use search::{
    rerank_exact, search_in_cluster, ClusterScan, PointFilter, SearchDiagnostics, SearchRequest, SearchResult,
};

use rayon::prelude::*;

use crate::adaptive::{build_cluster_stats_seeded, AdaptiveModels, ClusterStats};
use crate::dataset::{normalize_all, Metric, VectorSet};
use crate::error::{Error, Result};
use crate::filtration::{compute_dim_stats, select_dims, DimFilter};
use crate::kmeans::{train_kmeans, Clustering, KMeansConfig};
use crate::leafgraph::{build_leaf_graph, LeafGraph};
use crate::pq::{
    compute_residuals, encode_all, pack_blocks, subspace_count, train_codebooks, CodeBlock, Codebooks, ResidualMode,
    DEFAULT_SUB_DIM,
};

/// Build-time settings.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexParams {
    pub metric: Metric,
    /// Number of IVF clusters; `None` means `round(sqrt(n))`.
    pub num_clusters: Option<usize>,
    /// Dimensions per PQ subspace.
    pub sub_dim: usize,
    pub residual_mode: ResidualMode,
    pub kmeans_iters: usize,
    pub kmeans_epsilon: f64,
    pub pq_iters: usize,
    /// Train the codebooks on at most this many residuals.
    pub pq_train_sample: Option<usize>,
    /// Dimension filtration threshold; `None` disables filtration.
    pub filter_threshold: Option<f32>,
    /// Out-degree of the per-cluster graphs; `None` builds no graphs.
    pub graph_degree: Option<usize>,
    pub seed: u64,
}

impl IndexParams {
    pub fn new(metric: Metric) -> Self {
        Self {
            metric,
            num_clusters: None,
            sub_dim: DEFAULT_SUB_DIM,
            residual_mode: ResidualMode::RawMean,
            kmeans_iters: 25,
            kmeans_epsilon: 1e-4,
            pq_iters: 25,
            pq_train_sample: None,
            filter_threshold: None,
            graph_degree: None,
            seed: 0,
        }
    }

    pub fn clusters_for(&self, n: usize) -> usize {
        self.num_clusters
            .unwrap_or_else(|| (n as f64).sqrt().round() as usize)
            .max(1)
    }
}

/// An immutable searchable index.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub(crate) params: IndexParams,
    /// Vectors in the original dimensionality; all exact distances use these.
    pub(crate) original: VectorSet,
    pub(crate) filter: Option<DimFilter>,
    /// Clustering in the working space (filtered, and unit-normalized for
    /// the angular metric).
    pub(crate) clustering: Clustering,
    pub(crate) members: Vec<Vec<u32>>,
    pub(crate) codebooks: Codebooks,
    pub(crate) blocks: Vec<Vec<CodeBlock>>,
    pub(crate) graphs: Option<Vec<LeafGraph>>,
    pub(crate) stats: Option<Vec<ClusterStats>>,
    pub(crate) models: Option<AdaptiveModels>,
}

/// Builds an index over `set` (its metric is replaced by `params.metric`).
pub fn build_index(set: &VectorSet, params: &IndexParams) -> Result<Index> {
    let n = set.len();
    let l = params.clusters_for(n);
    if n == 0 || l > n {
        return Err(Error::NotEnoughPoints {
            requested: l,
            available: n,
        });
    }
    if params.sub_dim == 0 {
        return Err(Error::InvalidParameter("sub_dim must be at least 1".into()));
    }
    let original = set.clone().with_metric(params.metric);
    let filter = match params.filter_threshold {
        Some(t) => Some(select_dims(&compute_dim_stats(&original)?, t)?),
        None => None,
    };
    let working = working_set(&original, filter.as_ref())?;
    let dim = working.dim();
    let kcfg = KMeansConfig {
        max_iters: params.kmeans_iters,
        epsilon: params.kmeans_epsilon,
        seed: params.seed,
    };
    let mut clustering = train_kmeans(working.as_slice(), dim, l, &kcfg)?;
    if params.metric == Metric::Angular || params.residual_mode == ResidualMode::Normalized {
        clustering = clustering.with_normalized();
    }
    let residuals = compute_residuals(&working, &clustering, params.residual_mode)?;
    let m = subspace_count(dim, params.sub_dim);
    let pq_cfg = KMeansConfig {
        max_iters: params.pq_iters,
        epsilon: params.kmeans_epsilon,
        seed: params.seed ^ 0xC0DE_B00C,
    };
    let codebooks = match params.pq_train_sample {
        Some(s) if s < n => {
            let step = n as f64 / s.max(crate::pq::CODEBOOK_SIZE) as f64;
            let ids: Vec<usize> = (0..s.max(crate::pq::CODEBOOK_SIZE))
                .map(|i| ((i as f64 * step) as usize).min(n - 1))
                .collect();
            train_codebooks(&residuals.select(&ids), m, &pq_cfg)?
        }
        _ => train_codebooks(&residuals, m, &pq_cfg)?,
    };
    let codes = encode_all(&residuals, &codebooks)?;
    let members = clustering.members();
    let blocks = members
        .iter()
        .map(|ids| {
            let mut c = Vec::with_capacity(ids.len() * m);
            for &i in ids {
                c.extend_from_slice(&codes[i as usize * m..(i as usize + 1) * m]);
            }
            pack_blocks(&c, ids, m)
        })
        .collect::<Result<Vec<_>>>()?;
    let graphs = match params.graph_degree {
        Some(r) => Some(build_graphs(&working, &clustering, &members, r)?),
        None => None,
    };
    Ok(Index {
        params: params.clone(),
        original,
        filter,
        clustering,
        members,
        codebooks,
        blocks,
        graphs,
        stats: None,
        models: None,
    })
}

fn build_graphs(
    working: &VectorSet,
    clustering: &Clustering,
    members: &[Vec<u32>],
    degree: usize,
) -> Result<Vec<LeafGraph>> {
    let dim = working.dim();
    members
        .par_iter()
        .enumerate()
        .map(|(j, ids)| {
            if ids.is_empty() {
                return LeafGraph::from_parts(0, degree, Vec::new(), 0);
            }
            let mut pts = Vec::with_capacity(ids.len() * dim);
            for &i in ids {
                pts.extend_from_slice(working.row(i as usize));
            }
            build_leaf_graph(&pts, dim, clustering.centroid(j), degree)
        })
        .collect()
}

/// Filtered (and, for the angular metric, unit-normalized) copy of `original`.
fn working_set(original: &VectorSet, filter: Option<&DimFilter>) -> Result<VectorSet> {
    let filtered = match filter {
        Some(f) => f.apply_set(original)?,
        None => original.clone(),
    };
    Ok(if original.metric() == Metric::Angular {
        normalize_all(&filtered).set
    } else {
        filtered
    })
}

impl Index {
    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn metric(&self) -> Metric {
        self.params.metric
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    /// Original dimensionality (queries must have this many components).
    pub fn dim(&self) -> usize {
        self.original.dim()
    }

    /// Dimensionality after filtration.
    pub fn working_dim(&self) -> usize {
        self.clustering.dim()
    }

    pub fn num_clusters(&self) -> usize {
        self.clustering.k()
    }

    pub fn vectors(&self) -> &VectorSet {
        &self.original
    }

    /// The unfiltered vectors, present only when filtration is active.
    pub fn x_init(&self) -> Option<&VectorSet> {
        self.filter.as_ref().map(|_| &self.original)
    }

    pub fn filter(&self) -> Option<&DimFilter> {
        self.filter.as_ref()
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn members(&self, cluster: usize) -> &[u32] {
        &self.members[cluster]
    }

    pub fn codebooks(&self) -> &Codebooks {
        &self.codebooks
    }

    pub fn residual_mode(&self) -> ResidualMode {
        self.params.residual_mode
    }

    pub fn blocks(&self, cluster: usize) -> &[CodeBlock] {
        &self.blocks[cluster]
    }

    pub fn graphs(&self) -> Option<&[LeafGraph]> {
        self.graphs.as_deref()
    }

    pub fn stats(&self) -> Option<&[ClusterStats]> {
        self.stats.as_deref()
    }

    pub fn models(&self) -> Option<&AdaptiveModels> {
        self.models.as_ref()
    }

    /// Vectors as the index sees them: filtered, and normalized for angular.
    pub fn working_vectors(&self) -> Result<VectorSet> {
        working_set(&self.original, self.filter.as_ref())
    }

    /// Maps an original-space query into the working space.
    pub fn working_query(&self, q: &[f32]) -> Result<Vec<f32>> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: q.len(),
            });
        }
        let mut v = match &self.filter {
            Some(f) => f.apply(q)?,
            None => q.to_vec(),
        };
        if self.metric() == Metric::Angular {
            crate::dataset::normalize_in_place(&mut v);
        }
        Ok(v)
    }

    /// Computes per-cluster statistics if they are missing.
    pub fn ensure_stats(&mut self) -> Result<&[ClusterStats]> {
        if self.stats.is_none() {
            let working = self.working_vectors()?;
            self.stats = Some(build_cluster_stats_seeded(
                &working,
                &self.clustering,
                self.params.seed,
            )?);
        }
        Ok(self.stats.as_deref().unwrap())
    }

    /// Builds graphs after the fact (no-op when they already exist with this degree).
    pub fn ensure_graphs(&mut self, degree: usize) -> Result<()> {
        if self
            .graphs
            .as_ref()
            .is_some_and(|g| g.iter().all(|g| g.degree() == degree))
        {
            return Ok(());
        }
        let working = self.working_vectors()?;
        self.graphs = Some(build_graphs(&working, &self.clustering, &self.members, degree)?);
        self.params.graph_degree = Some(degree);
        Ok(())
    }

    pub fn set_models(&mut self, models: Option<AdaptiveModels>) {
        self.models = models;
    }

    /// Labels and fits the predictors on `queries`, storing them in the index.
    pub fn train(
        &mut self,
        queries: &VectorSet,
        truth: &crate::dataset::GroundTruth,
        params: &crate::adaptive::TrainParams,
    ) -> Result<()> {
        self.ensure_stats()?;
        let models = crate::adaptive::train_models(self, queries, truth, params)?;
        self.models = Some(models);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, dim: usize, seed: u64) -> VectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorSet::new(
            dim,
            Metric::L2,
            (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn small_index_shape() {
        let set = random_set(64, 8, 1);
        let p = IndexParams {
            num_clusters: Some(2),
            ..IndexParams::new(Metric::L2)
        };
        let idx = build_index(&set, &p).unwrap();
        assert_eq!(idx.num_clusters(), 2);
        assert!(idx.x_init().is_none());
        let mut seen = vec![0u32; 64];
        for c in 0..2 {
            assert!(!idx.blocks(c).is_empty());
            for b in idx.blocks(c) {
                for &id in b.ids() {
                    seen[id as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn too_many_clusters() {
        let set = random_set(10, 4, 2);
        let p = IndexParams {
            num_clusters: Some(11),
            ..IndexParams::new(Metric::L2)
        };
        assert!(matches!(build_index(&set, &p), Err(Error::NotEnoughPoints { .. })));
    }
}
