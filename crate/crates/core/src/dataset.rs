//! Vector containers, metrics, TEXMEX-style `.fvecs/.bvecs/.ivecs` I/O and
//! exact brute-force ground truth.
//!
//! All metrics follow a lower-is-better convention: `L2` is the squared
//! Euclidean distance, `Angular` is `1 - cos`, `InnerProduct` is `-<x, y>`.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    L2,
    Angular,
    InnerProduct,
}

impl Metric {
    /// Score between two equal-length vectors. Lengths are only checked in
    /// debug builds; use [`distance`] for a checked call.
    #[inline]
    pub fn score(self, x: &[f32], y: &[f32]) -> f32 {
        match self {
            Metric::L2 => l2_squared(x, y),
            Metric::Angular => {
                let denom = (dot(x, x) * dot(y, y)).sqrt();
                if denom == 0.0 {
                    1.0
                } else {
                    1.0 - dot(x, y) / denom
                }
            }
            Metric::InnerProduct => -dot(x, y),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Angular => 1,
            Metric::InnerProduct => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Metric::L2),
            1 => Some(Metric::Angular),
            2 => Some(Metric::InnerProduct),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Angular => "angular",
            Metric::InnerProduct => "ip",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "euclidean" => Ok(Metric::L2),
            "angular" | "cosine" => Ok(Metric::Angular),
            "ip" | "inner_product" | "dot" => Ok(Metric::InnerProduct),
            other => Err(Error::InvalidParameter(format!("unknown metric '{other}'"))),
        }
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn l2_squared(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Checked distance between two vectors.
pub fn distance(x: &[f32], y: &[f32], metric: Metric) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(metric.score(x, y))
}

/// Dense row-major set of `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    data: Vec<f32>,
    dim: usize,
    metric: Metric,
}

impl VectorSet {
    pub fn new(dim: usize, metric: Metric, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(Error::InvalidParameter("dimension must be at least 1".into()));
            }
        } else if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite value at row {}",
                pos / dim.max(1)
            )));
        }
        Ok(Self { data, dim, metric })
    }

    pub fn empty(dim: usize, metric: Metric) -> Self {
        Self {
            data: Vec::new(),
            dim,
            metric,
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], metric: Metric) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, metric, data)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// New set holding the given rows, in order.
    pub fn select(&self, ids: &[usize]) -> VectorSet {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        VectorSet {
            data,
            dim: self.dim,
            metric: self.metric,
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> VectorSet {
        let n = n.min(self.len());
        VectorSet {
            data: self.data[..n * self.dim].to_vec(),
            dim: self.dim,
            metric: self.metric,
        }
    }
}

/// Rows scaled to unit norm; rows with zero norm are returned unchanged and
/// reported in `zero_rows`.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub set: VectorSet,
    pub zero_rows: Vec<usize>,
}

pub fn normalize_all(set: &VectorSet) -> Normalized {
    let mut data = set.data.clone();
    let mut zero_rows = Vec::new();
    if set.dim > 0 {
        for (i, row) in data.chunks_exact_mut(set.dim).enumerate() {
            if !normalize_in_place(row) {
                zero_rows.push(i);
            }
        }
    }
    Normalized {
        set: VectorSet {
            data,
            dim: set.dim,
            metric: set.metric,
        },
        zero_rows,
    }
}

/// Scales `v` to unit norm. Returns false (and leaves `v` alone) for a zero vector.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecsFormat {
    Fvecs,
    Bvecs,
    Ivecs,
}

impl VecsFormat {
    fn elem_size(self) -> usize {
        match self {
            VecsFormat::Bvecs => 1,
            VecsFormat::Fvecs | VecsFormat::Ivecs => 4,
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(VecsFormat::Fvecs),
            "bvecs" => Some(VecsFormat::Bvecs),
            "ivecs" => Some(VecsFormat::Ivecs),
            _ => None,
        }
    }
}

impl FromStr for VecsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvecs" => Ok(VecsFormat::Fvecs),
            "bvecs" => Ok(VecsFormat::Bvecs),
            "ivecs" => Ok(VecsFormat::Ivecs),
            other => Err(Error::InvalidParameter(format!("unknown vecs format '{other}'"))),
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a whole vecs file. `bvecs` and `ivecs` payloads are widened to `f32`.
/// The returned set is tagged `L2`.
pub fn load_vectors(path: impl AsRef<Path>, format: VecsFormat) -> Result<VectorSet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_vecs(&bytes, format).map_err(|reason| format_err(path, reason))
}

/// Like [`load_vectors`], picking the format from the file extension.
pub fn load_vectors_auto(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    let format =
        VecsFormat::from_path(path).ok_or_else(|| format_err(path, "expected a .fvecs, .bvecs or .ivecs extension"))?;
    load_vectors(path, format)
}

fn parse_vecs(bytes: &[u8], format: VecsFormat) -> std::result::Result<VectorSet, String> {
    let elem = format.elem_size();
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut pos = 0usize;
    let mut record = 0usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(format!("truncated header in record {record}"));
        }
        let d = i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if d <= 0 {
            return Err(format!("record {record} has dimension {d}"));
        }
        let d = d as usize;
        match dim {
            None => {
                dim = Some(d);
                data.reserve(bytes.len() / (4 + d * elem) * d);
            }
            Some(expected) if expected != d => {
                return Err(format!("record {record} has dimension {d}, expected {expected}"));
            }
            _ => {}
        }
        pos += 4;
        let len = d * elem;
        if bytes.len() - pos < len {
            return Err(format!("truncated payload in record {record}"));
        }
        let payload = &bytes[pos..pos + len];
        match format {
            VecsFormat::Fvecs => data.extend(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            ),
            VecsFormat::Ivecs => data.extend(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32),
            ),
            VecsFormat::Bvecs => data.extend(payload.iter().map(|&b| b as f32)),
        }
        pos += len;
        record += 1;
    }
    VectorSet::new(dim.unwrap_or(0), Metric::L2, data).map_err(|e| e.to_string())
}

pub fn save_fvecs(path: impl AsRef<Path>, set: &VectorSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in set.rows().filter(|_| set.dim > 0) {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes rows as `bvecs`. Fails if a value is not an integer in `0..=255`.
pub fn save_bvecs(path: impl AsRef<Path>, set: &VectorSet) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    for row in set.rows().filter(|_| set.dim > 0) {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for &v in row {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(format_err(path, format!("value {v} is not a byte")));
            }
            w.write_all(&[v as u8])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ivecs(path: impl AsRef<Path>, rows: &[Vec<i32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One `(id, distance)` pair. Ordered by distance, then by id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub distance: f32,
}

impl Neighbor {
    #[inline]
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then(self.id.cmp(&other.id))
    }
}

/// Keeps the `k` smallest entries (by distance, then id), sorted.
pub fn select_topk(mut all: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    if k == 0 {
        return Vec::new();
    }
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, Neighbor::cmp_key);
        all.truncate(k);
        all.shrink_to_fit();
    }
    all.sort_unstable_by(Neighbor::cmp_key);
    all
}

/// Exact per-query nearest neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self, query: usize) -> impl Iterator<Item = u32> + '_ {
        self.neighbors[query].iter().map(|n| n.id)
    }

    /// Writes ids as `ivecs` and distances as `fvecs`, one record per query.
    pub fn save(&self, ids_path: impl AsRef<Path>, dist_path: impl AsRef<Path>) -> Result<()> {
        let ids: Vec<Vec<i32>> = self
            .neighbors
            .iter()
            .map(|row| row.iter().map(|n| n.id as i32).collect())
            .collect();
        save_ivecs(ids_path, &ids)?;
        let mut w = BufWriter::new(File::create(dist_path)?);
        for row in &self.neighbors {
            w.write_all(&(row.len() as i32).to_le_bytes())?;
            for n in row {
                w.write_all(&n.distance.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads an `ivecs` id file and, optionally, the matching `fvecs` distances.
    pub fn load(ids_path: impl AsRef<Path>, dist_path: Option<&Path>) -> Result<Self> {
        let ids_path = ids_path.as_ref();
        let ids = load_vectors(ids_path, VecsFormat::Ivecs)?;
        let dists = match dist_path {
            Some(p) => {
                let d = load_vectors(p, VecsFormat::Fvecs)?;
                if d.len() != ids.len() || d.dim() != ids.dim() {
                    return Err(format_err(p, "distance file does not match id file"));
                }
                Some(d)
            }
            None => None,
        };
        let neighbors = (0..ids.len())
            .map(|q| {
                ids.row(q)
                    .iter()
                    .enumerate()
                    .map(|(j, &id)| Neighbor {
                        id: id as u32,
                        distance: dists.as_ref().map_or(f32::NAN, |d| d.row(q)[j]),
                    })
                    .collect()
            })
            .collect();
        Ok(GroundTruth {
            k: ids.dim(),
            neighbors,
        })
    }
}

/// Exact top-`k` for every query under `set.metric()`, ties broken by smaller id.
pub fn brute_force_topk(set: &VectorSet, queries: &VectorSet, k: usize) -> Result<GroundTruth> {
    if k > set.len() {
        return Err(Error::NotEnoughPoints {
            requested: k,
            available: set.len(),
        });
    }
    if !queries.is_empty() && queries.dim() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            actual: queries.dim(),
        });
    }
    let metric = set.metric();
    let neighbors = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let all = set
                .rows()
                .enumerate()
                .map(|(i, x)| Neighbor {
                    id: i as u32,
                    distance: metric.score(q, x),
                })
                .collect();
            select_topk(all, k)
        })
        .collect();
    Ok(GroundTruth { k, neighbors })
}

/// Mean fraction of the true top-`k` ids found among the first `k` results.
pub fn recall_at_k(results: &[Vec<u32>], truth: &GroundTruth, k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: usize = results
        .iter()
        .enumerate()
        .map(|(q, found)| {
            let truth_ids: Vec<u32> = truth.ids(q).take(k).collect();
            found.iter().take(k).filter(|id| truth_ids.contains(id)).count()
        })
        .sum();
    total as f64 / (results.len() * k) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(distance(&x, &x, Metric::L2).unwrap(), 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], Metric::L2).unwrap(), 25.0);
        assert_eq!(distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Angular).unwrap(), 1.0);
        assert_eq!(distance(&[1.0, 2.0], &[3.0, 4.0], Metric::InnerProduct).unwrap(), -11.0);
        assert!(matches!(
            distance(&[1.0], &[1.0, 2.0], Metric::L2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let set = VectorSet::from_rows(&[[3.0f32, 4.0], [0.0, 0.0], [0.6, 0.8]], Metric::Angular).unwrap();
        let out = normalize_all(&set);
        let r0 = out.set.row(0);
        assert!((r0[0] - 0.6).abs() < 1e-7 && (r0[1] - 0.8).abs() < 1e-7);
        assert_eq!(out.set.row(1), &[0.0, 0.0]);
        assert_eq!(out.zero_rows, vec![1]);
        let r2 = out.set.row(2);
        assert!((r2[0] - 0.6).abs() < 1e-7 && (r2[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn vectorset_rejects_non_finite() {
        assert!(VectorSet::new(2, Metric::L2, vec![1.0, f32::NAN]).is_err());
        assert!(VectorSet::new(2, Metric::L2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn parse_errors() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        bytes.extend_from_slice(&2f32.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(parse_vecs(&bytes, VecsFormat::Fvecs)
            .unwrap_err()
            .contains("dimension 3"));
        assert!(parse_vecs(&bytes[..10], VecsFormat::Fvecs)
            .unwrap_err()
            .contains("truncated"));
        let zero = 0i32.to_le_bytes();
        assert!(parse_vecs(&zero, VecsFormat::Fvecs).is_err());
        let empty = parse_vecs(&[], VecsFormat::Fvecs).unwrap();
        assert_eq!(empty.len(), 0);
    }

    #[test]
    fn bvecs_and_ivecs_widen() {
        let mut b = Vec::new();
        b.extend_from_slice(&3i32.to_le_bytes());
        b.extend_from_slice(&[0, 128, 255]);
        let set = parse_vecs(&b, VecsFormat::Bvecs).unwrap();
        assert_eq!(set.row(0), &[0.0, 128.0, 255.0]);

        let mut iv = Vec::new();
        iv.extend_from_slice(&2i32.to_le_bytes());
        iv.extend_from_slice(&(-7i32).to_le_bytes());
        iv.extend_from_slice(&9i32.to_le_bytes());
        let set = parse_vecs(&iv, VecsFormat::Ivecs).unwrap();
        assert_eq!(set.row(0), &[-7.0, 9.0]);
    }

    #[test]
    fn topk_ties_by_id() {
        let set = VectorSet::from_rows(&[[1.0f32], [0.0], [1.0], [-1.0]], Metric::L2).unwrap();
        let q = VectorSet::from_rows(&[[0.0f32]], Metric::L2).unwrap();
        let gt = brute_force_topk(&set, &q, 4).unwrap();
        let ids: Vec<u32> = gt.ids(0).collect();
        assert_eq!(ids, vec![1, 0, 2, 3]);
        assert!(brute_force_topk(&set, &q, 5).is_err());
    }

    #[test]
    fn recall_hand_counted() {
        let gt = GroundTruth {
            k: 2,
            neighbors: vec![
                vec![Neighbor { id: 1, distance: 0.0 }, Neighbor { id: 2, distance: 1.0 }],
                vec![Neighbor { id: 3, distance: 0.0 }, Neighbor { id: 4, distance: 1.0 }],
                vec![Neighbor { id: 5, distance: 0.0 }, Neighbor { id: 6, distance: 1.0 }],
            ],
        };
        // 2 + 1 + 0 hits out of 6.
        let found = vec![vec![2, 1], vec![3, 9], vec![7, 8]];
        assert!((recall_at_k(&found, &gt, 2) - 0.5).abs() < 1e-12);
    }
}
