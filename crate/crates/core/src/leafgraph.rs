//! Per-cluster k-NN graphs and the policy that mixes graph search with
//! block scans.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::dataset::{l2_squared, Neighbor};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::lut::QuantizedLut;
use crate::pq::{CodeBlock, BLOCK_SIZE};

pub const DEFAULT_DEGREE: usize = 16;
pub const NO_NEIGHBOR: u32 = u32::MAX;

/// Fixed-degree adjacency over a cluster's members (local ids = positions in
/// the ascending member list). Each list occupies a whole number of 32-entry
/// slots, unused entries hold `NO_NEIGHBOR`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafGraph {
    len: usize,
    degree: usize,
    stride: usize,
    adjacency: Vec<u32>,
    entry: u32,
}

fn stride_for(degree: usize) -> usize {
    degree.max(1).div_ceil(BLOCK_SIZE) * BLOCK_SIZE
}

impl LeafGraph {
    pub(crate) fn from_parts(len: usize, degree: usize, adjacency: Vec<u32>, entry: u32) -> Result<Self> {
        let stride = stride_for(degree);
        let bad = |m: &str| Err(Error::Corrupt(format!("leaf graph: {m}")));
        if adjacency.len() != len * stride {
            return bad("adjacency size");
        }
        if len > 0 && entry as usize >= len {
            return bad("entry point");
        }
        for (i, row) in adjacency.chunks_exact(stride).enumerate() {
            if row[degree..].iter().any(|&v| v != NO_NEIGHBOR) {
                return bad("degree");
            }
            if row
                .iter()
                .any(|&v| v != NO_NEIGHBOR && (v as usize >= len || v as usize == i))
            {
                return bad("neighbor id");
            }
        }
        Ok(Self {
            len,
            degree,
            stride,
            adjacency,
            entry,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    /// Raw padded adjacency, `len * stride` entries.
    pub fn adjacency(&self) -> &[u32] {
        &self.adjacency
    }

    pub fn neighbors(&self, local: u32) -> impl Iterator<Item = u32> + '_ {
        let s = local as usize * self.stride;
        self.adjacency[s..s + self.stride]
            .iter()
            .copied()
            .take_while(|&v| v != NO_NEIGHBOR)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&v| v != NO_NEIGHBOR).count()
    }
}

/// Links every point to its `degree` exact nearest neighbors (squared L2,
/// ties to the smaller id) within the cluster. The entry point is the member
/// nearest to `centroid`.
pub fn build_leaf_graph(points: &[f32], dim: usize, centroid: &[f32], degree: usize) -> Result<LeafGraph> {
    if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidParameter("leaf graph needs at least one point".into()));
    }
    if centroid.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: centroid.len(),
        });
    }
    let n = points.len() / dim;
    let stride = stride_for(degree);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let adjacency: Vec<u32> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut all: Vec<Neighbor> = (0..n)
                .filter(|&j| j != i)
                .map(|j| Neighbor {
                    id: j as u32,
                    distance: l2_squared(row(i), row(j)),
                })
                .collect();
            let r = degree.min(all.len());
            if r > 0 && all.len() > r {
                all.select_nth_unstable_by(r - 1, Neighbor::cmp_key);
                all.truncate(r);
            }
            all.sort_unstable_by(Neighbor::cmp_key);
            let mut out = vec![NO_NEIGHBOR; stride];
            for (o, nb) in out.iter_mut().zip(&all) {
                *o = nb.id;
            }
            out
        })
        .collect();
    let entry = (0..n)
        .map(|i| (l2_squared(row(i), centroid), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map_or(0, |(_, i)| i as u32);
    Ok(LeafGraph {
        len: n,
        degree,
        stride,
        adjacency,
        entry,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f32, u32);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Candidates (global ids, dequantized distances, ascending) and the number
/// of points whose distance was evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSearchOutput {
    pub candidates: Vec<Neighbor>,
    pub evaluations: usize,
}

/// Best-first beam search over one cluster's graph with a result pool of
/// `efs`. Distances come from the same quantized LUT and kernel as block
/// scans: the unvisited neighbors of an expanded node are gathered into a
/// temporary block.
pub fn graph_search(
    graph: &LeafGraph,
    blocks: &[CodeBlock],
    qlut: &QuantizedLut,
    efs: usize,
    kernel: &Kernel,
) -> GraphSearchOutput {
    let n = graph.len();
    if n == 0 || blocks.is_empty() {
        return GraphSearchOutput {
            candidates: Vec::new(),
            evaluations: 0,
        };
    }
    let efs = efs.max(1);
    let m = blocks[0].m();
    let global = |l: u32| blocks[l as usize / BLOCK_SIZE].ids()[l as usize % BLOCK_SIZE];
    let mut visited = vec![false; n];
    let mut scratch = CodeBlock::padded(m);
    let mut locals: Vec<u32> = Vec::with_capacity(BLOCK_SIZE);
    let mut frontier: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    let mut results: BinaryHeap<Key> = BinaryHeap::new();
    let mut evaluations = 0usize;

    let mut flush = |scratch: &mut CodeBlock,
                     locals: &mut Vec<u32>,
                     frontier: &mut BinaryHeap<Reverse<Key>>,
                     results: &mut BinaryHeap<Key>| {
        if locals.is_empty() {
            return;
        }
        let d = kernel.distances(qlut, scratch);
        for (s, &l) in locals.iter().enumerate() {
            let key = Key(qlut.dequantize(d.slot(s)), l);
            if results.len() < efs || key < *results.peek().unwrap() {
                frontier.push(Reverse(key));
                results.push(key);
                if results.len() > efs {
                    results.pop();
                }
            }
        }
        evaluations += locals.len();
        locals.clear();
        scratch.clear();
    };

    let entry = graph.entry();
    visited[entry as usize] = true;
    scratch.push_from(
        &blocks[entry as usize / BLOCK_SIZE],
        entry as usize % BLOCK_SIZE,
        global(entry),
    );
    locals.push(entry);
    flush(&mut scratch, &mut locals, &mut frontier, &mut results);

    while let Some(Reverse(c)) = frontier.pop() {
        if results.len() >= efs && c > *results.peek().unwrap() {
            break;
        }
        for nb in graph.neighbors(c.1) {
            if visited[nb as usize] {
                continue;
            }
            visited[nb as usize] = true;
            scratch.push_from(&blocks[nb as usize / BLOCK_SIZE], nb as usize % BLOCK_SIZE, global(nb));
            locals.push(nb);
            if scratch.is_full() {
                flush(&mut scratch, &mut locals, &mut frontier, &mut results);
            }
        }
        flush(&mut scratch, &mut locals, &mut frontier, &mut results);
    }
    let mut out: Vec<Key> = results.into_vec();
    out.sort_unstable();
    GraphSearchOutput {
        candidates: out
            .into_iter()
            .map(|k| Neighbor {
                id: global(k.1),
                distance: k.0,
            })
            .collect(),
        evaluations,
    }
}

/// How the clusters after the nearest few are searched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridPolicy {
    /// The nearest `brute_force_clusters` probed clusters are always scanned
    /// in full; `usize::MAX` disables graph search.
    pub brute_force_clusters: usize,
    /// Graph result pool size; `None` means `2 k`.
    pub efs: Option<usize>,
    /// Escalate when at least this fraction of `efs` graph results beat the
    /// running pool's worst distance.
    pub escalate_fraction: f32,
}

impl Default for HybridPolicy {
    fn default() -> Self {
        Self {
            brute_force_clusters: 3,
            efs: None,
            escalate_fraction: 0.25,
        }
    }
}

impl HybridPolicy {
    pub fn brute_force_only() -> Self {
        Self {
            brute_force_clusters: usize::MAX,
            ..Self::default()
        }
    }

    pub fn efs_for(&self, k: usize) -> usize {
        self.efs.unwrap_or(2 * k).max(k).max(1)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(e) = self.efs {
            if e < k {
                return Err(Error::InvalidParameter(format!("efs ({e}) must be at least k ({k})")));
            }
        }
        if !(self.escalate_fraction > 0.0 && self.escalate_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "escalation fraction must be in (0, 1], got {}",
                self.escalate_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    BruteForce,
    Graph,
}

/// `rank` is the cluster's position among the probed clusters (0 = nearest).
pub fn choose_strategy(rank: usize, policy: &HybridPolicy) -> Strategy {
    if rank < policy.brute_force_clusters {
        Strategy::BruteForce
    } else {
        Strategy::Graph
    }
}

/// True when the graph found enough candidates better than the pool's worst
/// (`None` while the pool still has room) to justify a full scan.
pub fn should_escalate(graph_results: &[Neighbor], pool_worst: Option<f32>, efs: usize, fraction: f32) -> bool {
    let Some(worst) = pool_worst else {
        return true;
    };
    let better = graph_results.iter().filter(|n| n.distance < worst).count();
    better as f32 >= fraction * efs as f32
}
