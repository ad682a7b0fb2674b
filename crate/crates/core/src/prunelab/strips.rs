//! Strip-based filtering along one global direction.

use crate::adaptive::features::power_iteration;
use crate::dataset::{dot, l2_squared, Neighbor, VectorSet};
use crate::engine::Index;
use crate::error::{Error, Result};
use crate::kernels::CandidatePool;

pub const DEFAULT_STRIPS: usize = 16;

/// Equal-width strips of one cluster's projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStrips {
    /// `strips + 1` ascending boundaries.
    pub boundaries: Vec<f32>,
    /// `(projection, global id)` sorted by projection.
    pub projections: Vec<(f32, u32)>,
    /// Strip `s` owns `projections[starts[s]..starts[s + 1]]`.
    pub starts: Vec<usize>,
}

impl ClusterStrips {
    fn build(proj: Vec<(f32, u32)>, strips: usize) -> Self {
        let mut projections = proj;
        projections.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (lo, hi) = match (projections.first(), projections.last()) {
            (Some(a), Some(b)) => (a.0, b.0),
            _ => (0.0, 0.0),
        };
        let width = (hi - lo) / strips as f32;
        let mut boundaries: Vec<f32> = (0..=strips).map(|s| lo + s as f32 * width).collect();
        boundaries[strips] = hi;
        for s in 1..=strips {
            boundaries[s] = boundaries[s].max(boundaries[s - 1]);
        }
        let mut starts = vec![0usize; strips + 1];
        let mut s = 0;
        for (i, &(p, _)) in projections.iter().enumerate() {
            while s + 1 < strips && p >= boundaries[s + 1] {
                s += 1;
                starts[s] = i;
            }
        }
        for start in &mut starts[s + 1..=strips] {
            *start = projections.len();
        }
        Self {
            boundaries,
            projections,
            starts,
        }
    }

    pub fn strip_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn strip(&self, s: usize) -> &[(f32, u32)] {
        &self.projections[self.starts[s]..self.starts[s + 1]]
    }

    /// Squared gap between `p` and strip `s`'s interval (zero inside it).
    pub fn lower_bound(&self, s: usize, p: f32) -> f32 {
        let (a, b) = (self.boundaries[s], self.boundaries[s + 1]);
        let gap = if p < a {
            a - p
        } else if p > b {
            p - b
        } else {
            0.0
        };
        gap * gap
    }
}

/// One projection direction shared by all clusters plus per-cluster strips.
#[derive(Debug, Clone, PartialEq)]
pub struct StripsIndex {
    direction: Vec<f32>,
    clusters: Vec<ClusterStrips>,
}

/// Unit top principal direction of `points` (mean-centered).
pub fn top_direction(points: &VectorSet, seed: u64) -> Vec<f32> {
    let dim = points.dim();
    let n = points.len().max(1) as f64;
    let mut mean = vec![0f64; dim];
    for r in points.rows() {
        mean.iter_mut().zip(r).for_each(|(m, &x)| *m += x as f64);
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
    let mut centered = points.as_slice().to_vec();
    for r in centered.chunks_exact_mut(dim) {
        r.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    let mut a = power_iteration(&centered, dim, &[], seed);
    if a.iter().all(|&x| x == 0.0) {
        a[0] = 1.0;
    }
    a
}

impl StripsIndex {
    pub fn build(points: &VectorSet, members: &[Vec<u32>], strips: usize, seed: u64) -> Result<Self> {
        if strips == 0 {
            return Err(Error::InvalidParameter("strip count must be at least 1".into()));
        }
        let direction = top_direction(points, seed);
        let clusters = members
            .iter()
            .map(|ids| {
                let proj = ids
                    .iter()
                    .map(|&i| (dot(points.row(i as usize), &direction), i))
                    .collect();
                ClusterStrips::build(proj, strips)
            })
            .collect();
        Ok(Self { direction, clusters })
    }

    pub fn for_index(index: &Index, strips: usize, seed: u64) -> Result<Self> {
        let members: Vec<Vec<u32>> = (0..index.num_clusters()).map(|j| index.members(j).to_vec()).collect();
        Self::build(&index.working_vectors()?, &members, strips, seed)
    }

    pub fn direction(&self) -> &[f32] {
        &self.direction
    }

    pub fn cluster(&self, j: usize) -> &ClusterStrips {
        &self.clusters[j]
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }
}

/// What one strips scan touched.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StripsScan {
    /// Strip indices in visiting order.
    pub visited: Vec<usize>,
    /// Points whose exact distance was computed.
    pub evaluated: usize,
}

/// Scans `cluster` strip by strip in ascending lower-bound order, pushing
/// exact squared L2 distances (over `points`) into `pool`. Stops once the
/// next strip's bound exceeds the pool's worst kept distance.
pub fn strips_scan(
    q: &[f32],
    cluster: usize,
    strips: &StripsIndex,
    points: &VectorSet,
    pool: &mut CandidatePool,
) -> StripsScan {
    let cs = &strips.clusters[cluster];
    let p = dot(q, &strips.direction);
    let mut order: Vec<(f32, usize)> = (0..cs.strip_count()).map(|s| (cs.lower_bound(s, p), s)).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = StripsScan::default();
    for (lb, s) in order {
        if pool.worst().is_some_and(|w| lb > w) {
            break;
        }
        out.visited.push(s);
        for &(_, id) in cs.strip(s) {
            pool.push(Neighbor {
                id,
                distance: l2_squared(q, points.row(id as usize)),
            });
            out.evaluated += 1;
        }
    }
    out
}
