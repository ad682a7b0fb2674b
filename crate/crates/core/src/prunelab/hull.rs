//! Convex-hull filtering for inner-product search in a low-rank PCA projection.

use crate::adaptive::features::power_iteration;
use crate::dataset::{dot, Metric, Neighbor, VectorSet};
use crate::engine::Index;
use crate::error::{Error, Result};
use crate::kernels::CandidatePool;

pub const DEFAULT_HULL_RANK: usize = 3;

/// Flags the vertices of the convex hull of `n` points in `r` dimensions
/// (`r` in 1..=3, row-major). Degenerate inputs fall back to the hull of
/// their affine span. Of several identical vertices only one is flagged.
pub fn hull_vertices(points: &[f64], r: usize) -> Result<Vec<bool>> {
    if !(1..=3).contains(&r) {
        return Err(Error::InvalidParameter(format!("hull rank must be 1, 2 or 3, got {r}")));
    }
    if !points.len().is_multiple_of(r) {
        return Err(Error::DimensionMismatch {
            expected: r,
            actual: points.len() % r,
        });
    }
    let n = points.len() / r;
    let pts: Vec<[f64; 3]> = points
        .chunks_exact(r)
        .map(|c| {
            let mut p = [0.0; 3];
            p[..r].copy_from_slice(c);
            p
        })
        .collect();
    let mut flags = vec![false; n];
    if n == 0 {
        return Ok(flags);
    }
    let scale = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0f64, |m, &x| m.max(x.abs()))
        .max(1e-300);
    let eps = 1e-10 * scale;
    for v in hull3(&pts, eps) {
        flags[v] = true;
    }
    Ok(flags)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn scaled(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn farthest(pts: &[[f64; 3]], f: impl Fn([f64; 3]) -> f64) -> (usize, f64) {
    pts.iter()
        .enumerate()
        .map(|(i, &p)| (i, f(p)))
        .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best })
}

/// Hull vertex indices of `pts`, handling affine rank 0 to 3.
fn hull3(pts: &[[f64; 3]], eps: f64) -> Vec<usize> {
    let p0 = farthest(pts, |p| -p[0] - 1e-3 * p[1] - 1e-6 * p[2]).0;
    let (p1, d1) = farthest(pts, |p| norm(sub(p, pts[p0])));
    if d1 <= eps {
        return vec![p0];
    }
    let u = scaled(sub(pts[p1], pts[p0]), 1.0 / d1);
    let (p2, d2) = farthest(pts, |p| norm(cross(u, sub(p, pts[p0]))));
    if d2 <= eps {
        // Collinear: the two extremes along `u`.
        let lo = farthest(pts, |p| -dot3(u, sub(p, pts[p0]))).0;
        let hi = farthest(pts, |p| dot3(u, sub(p, pts[p0]))).0;
        return vec![lo, hi];
    }
    let nrm = cross(sub(pts[p1], pts[p0]), sub(pts[p2], pts[p0]));
    let nrm = scaled(nrm, 1.0 / norm(nrm));
    let (p3, d3) = farthest(pts, |p| dot3(nrm, sub(p, pts[p0])).abs());
    if d3 <= eps {
        // Coplanar: 2-D hull in the plane's own coordinates.
        let e1 = u;
        let e2 = cross(nrm, e1);
        let planar: Vec<[f64; 2]> = pts
            .iter()
            .map(|&p| {
                let o = sub(p, pts[p0]);
                [dot3(o, e1), dot3(o, e2)]
            })
            .collect();
        return hull2(&planar, eps);
    }
    incremental_hull(pts, [p0, p1, p2, p3], eps)
}

/// Andrew's monotone chain; collinear boundary points are not vertices.
fn hull2(pts: &[[f64; 2]], eps: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(pts[a][1].total_cmp(&pts[b][1])));
    let turn = |o: usize, a: usize, b: usize| {
        let (o, a, b) = (pts[o], pts[a], pts[b]);
        let c = (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
        let len = ((a[0] - o[0]).hypot(a[1] - o[1])).max((b[0] - o[0]).hypot(b[1] - o[1]));
        c > eps * len
    };
    let chain = |it: &mut dyn Iterator<Item = usize>| {
        let mut h: Vec<usize> = Vec::new();
        for i in it {
            while h.len() >= 2 && !turn(h[h.len() - 2], h[h.len() - 1], i) {
                h.pop();
            }
            h.push(i);
        }
        h.pop();
        h
    };
    let mut lower = chain(&mut idx.iter().copied());
    let upper = chain(&mut idx.iter().rev().copied());
    lower.extend(upper);
    lower.sort_unstable();
    lower.dedup();
    lower
}

struct Face {
    v: [usize; 3],
    normal: [f64; 3],
    offset: f64,
}

impl Face {
    fn new(pts: &[[f64; 3]], v: [usize; 3], interior: [f64; 3]) -> Self {
        let mut normal = cross(sub(pts[v[1]], pts[v[0]]), sub(pts[v[2]], pts[v[0]]));
        let len = norm(normal);
        if len > 0.0 {
            normal = scaled(normal, 1.0 / len);
        }
        let mut offset = dot3(normal, pts[v[0]]);
        if dot3(normal, interior) - offset > 0.0 {
            normal = scaled(normal, -1.0);
            offset = -offset;
        }
        Face { v, normal, offset }
    }

    fn height(&self, p: [f64; 3]) -> f64 {
        dot3(self.normal, p) - self.offset
    }
}

fn incremental_hull(pts: &[[f64; 3]], seed: [usize; 4], eps: f64) -> Vec<usize> {
    let interior = scaled(
        seed.iter()
            .fold([0.0; 3], |a, &i| [a[0] + pts[i][0], a[1] + pts[i][1], a[2] + pts[i][2]]),
        0.25,
    );
    let [a, b, c, d] = seed;
    let mut faces: Vec<Face> = [[a, b, c], [a, b, d], [a, c, d], [b, c, d]]
        .into_iter()
        .map(|v| Face::new(pts, v, interior))
        .collect();
    for (i, &p) in pts.iter().enumerate() {
        if seed.contains(&i) {
            continue;
        }
        let visible: Vec<bool> = faces.iter().map(|f| f.height(p) > eps).collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for k in 0..3 {
                let (x, y) = (f.v[k], f.v[(k + 1) % 3]);
                edges.push((x.min(y), x.max(y)));
            }
        }
        edges.sort_unstable();
        let mut horizon = Vec::new();
        let mut k = 0;
        while k < edges.len() {
            let mut j = k;
            while j < edges.len() && edges[j] == edges[k] {
                j += 1;
            }
            if j - k == 1 {
                horizon.push(edges[k]);
            }
            k = j;
        }
        let mut keep = visible.iter().map(|v| !v);
        faces.retain(|_| keep.next().unwrap());
        for (x, y) in horizon {
            faces.push(Face::new(pts, [x, y, i], interior));
        }
    }
    let mut v: Vec<usize> = faces.iter().flat_map(|f| f.v).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// One cluster's projection and hull flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHull {
    /// Global ids in ascending order.
    pub ids: Vec<u32>,
    /// `rank * dim` row-major principal directions.
    pub basis: Vec<f32>,
    /// `ids.len() * rank` projected offsets.
    pub projected: Vec<f64>,
    pub vertex: Vec<bool>,
}

impl ClusterHull {
    pub fn vertex_count(&self) -> usize {
        self.vertex.iter().filter(|&&v| v).count()
    }
}

/// Per-cluster hull vertices of the rank-`r` PCA projection. Inner product only.
#[derive(Debug, Clone, PartialEq)]
pub struct HullIndex {
    rank: usize,
    clusters: Vec<ClusterHull>,
}

impl HullIndex {
    pub fn build(points: &VectorSet, centroids: &[f32], members: &[Vec<u32>], rank: usize, seed: u64) -> Result<Self> {
        if points.metric() != Metric::InnerProduct {
            return Err(Error::InvalidParameter(
                "hull filtering requires the inner-product metric".into(),
            ));
        }
        if !(1..=3).contains(&rank) {
            return Err(Error::InvalidParameter(format!(
                "hull rank must be 1, 2 or 3, got {rank}"
            )));
        }
        let dim = points.dim();
        let clusters = members
            .iter()
            .enumerate()
            .map(|(j, ids)| {
                let c = &centroids[j * dim..(j + 1) * dim];
                let mut offsets = Vec::with_capacity(ids.len() * dim);
                for &i in ids {
                    offsets.extend(points.row(i as usize).iter().zip(c).map(|(x, m)| x - m));
                }
                let mut basis: Vec<Vec<f32>> = Vec::with_capacity(rank);
                for r in 0..rank {
                    let prev: Vec<&[f32]> = basis.iter().map(|b| b.as_slice()).collect();
                    let b = power_iteration(&offsets, dim, &prev, seed ^ (j as u64) << 8 ^ r as u64);
                    basis.push(b);
                }
                let projected: Vec<f64> = offsets
                    .chunks_exact(dim)
                    .flat_map(|o| basis.iter().map(move |b| dot(o, b) as f64))
                    .collect();
                let vertex = hull_vertices(&projected, rank)?;
                Ok(ClusterHull {
                    ids: ids.clone(),
                    basis: basis.concat(),
                    projected,
                    vertex,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rank, clusters })
    }

    pub fn for_index(index: &Index, rank: usize, seed: u64) -> Result<Self> {
        let members: Vec<Vec<u32>> = (0..index.num_clusters()).map(|j| index.members(j).to_vec()).collect();
        Self::build(
            &index.working_vectors()?,
            index.clustering().centroids(),
            &members,
            rank,
            seed,
        )
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn cluster(&self, j: usize) -> &ClusterHull {
        &self.clusters[j]
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Fraction of points over all clusters that are not hull vertices.
    pub fn non_vertex_fraction(&self) -> f64 {
        let total: usize = self.clusters.iter().map(|c| c.ids.len()).sum();
        let verts: usize = self.clusters.iter().map(|c| c.vertex_count()).sum();
        if total == 0 {
            0.0
        } else {
            (total - verts) as f64 / total as f64
        }
    }
}

/// Hull vertices of `cluster` ranked by inner-product score against `q`.
pub fn hull_filter(q: &[f32], cluster: usize, hull: &HullIndex, points: &VectorSet) -> Result<Vec<Neighbor>> {
    if points.metric() != Metric::InnerProduct {
        return Err(Error::InvalidParameter(
            "hull filtering requires the inner-product metric".into(),
        ));
    }
    let ch = &hull.clusters[cluster];
    let mut out: Vec<Neighbor> = ch
        .ids
        .iter()
        .zip(&ch.vertex)
        .filter(|(_, &v)| v)
        .map(|(&id, _)| Neighbor {
            id,
            distance: Metric::InnerProduct.score(q, points.row(id as usize)),
        })
        .collect();
    out.sort_unstable_by(Neighbor::cmp_key);
    Ok(out)
}

/// What one hull scan touched.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HullScan {
    pub evaluated: usize,
    pub pruned: usize,
}

/// Scores the vertices first; interior points are scored only when the best
/// vertex would enter `pool`.
pub fn hull_scan(
    q: &[f32],
    cluster: usize,
    hull: &HullIndex,
    points: &VectorSet,
    pool: &mut CandidatePool,
) -> Result<HullScan> {
    let verts = hull_filter(q, cluster, hull, points)?;
    let ch = &hull.clusters[cluster];
    let enters = match (verts.first(), pool.worst()) {
        (None, _) => false,
        (Some(_), None) => true,
        (Some(b), Some(w)) => b.distance < w,
    };
    let mut out = HullScan {
        evaluated: verts.len(),
        pruned: 0,
    };
    for v in verts {
        pool.push(v);
    }
    let interior = ch.ids.iter().zip(&ch.vertex).filter(|(_, &v)| !v).map(|(&id, _)| id);
    if enters {
        for id in interior {
            pool.push(Neighbor {
                id,
                distance: Metric::InnerProduct.score(q, points.row(id as usize)),
            });
            out.evaluated += 1;
        }
    } else {
        out.pruned = interior.count();
    }
    Ok(out)
}
