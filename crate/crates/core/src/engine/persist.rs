//! Index file format.
//!
//! ```text
//! "KSCN" | u32 version | sections... | u64 xxhash64 of every preceding byte
//! ```
//!
//! Each section starts with a u32 tag. All integers and floats are little
//! endian; sequences carry a u64 length prefix; optional values a u8 flag.

use std::fs;
use std::path::Path;

use twox_hash::XxHash64;

use super::{Index, IndexParams};
use crate::adaptive::gbdt::{GbdtParams, Node, ProbModel, Tree};
use crate::adaptive::{AdaptiveModels, AdaptiveParams, ClusterStats, HISTOGRAM_BINS};
use crate::dataset::{Metric, VectorSet};
use crate::error::{Error, Result};
use crate::filtration::DimFilter;
use crate::kmeans::Clustering;
use crate::leafgraph::LeafGraph;
use crate::pq::{CodeBlock, Codebooks, ResidualMode};

pub const MAGIC: &[u8; 4] = b"KSCN";
pub const FORMAT_VERSION: u32 = 1;

const SEC_HEADER: u32 = 1;
const SEC_MASK: u32 = 2;
const SEC_VECTORS: u32 = 3;
const SEC_CENTROIDS: u32 = 4;
const SEC_CODEBOOKS: u32 = 5;
const SEC_BLOCKS: u32 = 6;
const SEC_GRAPHS: u32 = 7;
const SEC_STATS: u32 = 8;
const SEC_MODELS: u32 = 9;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.usize(v.len());
        self.buf.reserve(v.len() * 4);
        v.iter().for_each(|&x| self.f32(x));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn u32s(&mut self, v: &[u32]) {
        self.usize(v.len());
        self.buf.reserve(v.len() * 4);
        v.iter().for_each(|&x| self.u32(x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }
    fn opt_usize(&mut self, v: Option<usize>) {
        self.u8(v.is_some() as u8);
        self.usize(v.unwrap_or(0));
    }
    fn opt_f32(&mut self, v: Option<f32>) {
        self.u8(v.is_some() as u8);
        self.f32(v.unwrap_or(0.0));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Corrupt(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(corrupt("sequence longer than the file"));
        }
        Ok(n)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(corrupt("bad flag byte")),
        }
    }
    fn opt_usize(&mut self) -> Result<Option<usize>> {
        let some = self.flag()?;
        let v = self.usize()?;
        Ok(some.then_some(v))
    }
    fn opt_f32(&mut self) -> Result<Option<f32>> {
        let some = self.flag()?;
        let v = self.f32()?;
        Ok(some.then_some(v))
    }
    fn section(&mut self, tag: u32) -> Result<()> {
        if self.u32()? != tag {
            return Err(corrupt(&format!("expected section {tag}")));
        }
        Ok(())
    }
}

fn write_params(w: &mut Writer, p: &IndexParams) {
    w.u8(p.metric.tag());
    w.opt_usize(p.num_clusters);
    w.usize(p.sub_dim);
    w.u8(p.residual_mode.tag());
    w.usize(p.kmeans_iters);
    w.f64(p.kmeans_epsilon);
    w.usize(p.pq_iters);
    w.opt_usize(p.pq_train_sample);
    w.opt_f32(p.filter_threshold);
    w.opt_usize(p.graph_degree);
    w.u64(p.seed);
}

fn read_params(r: &mut Reader) -> Result<IndexParams> {
    let metric = Metric::from_tag(r.u8()?).ok_or_else(|| corrupt("metric"))?;
    Ok(IndexParams {
        metric,
        num_clusters: r.opt_usize()?,
        sub_dim: r.usize()?,
        residual_mode: ResidualMode::from_tag(r.u8()?).ok_or_else(|| corrupt("residual mode"))?,
        kmeans_iters: r.usize()?,
        kmeans_epsilon: r.f64()?,
        pq_iters: r.usize()?,
        pq_train_sample: r.opt_usize()?,
        filter_threshold: r.opt_f32()?,
        graph_degree: r.opt_usize()?,
        seed: r.u64()?,
    })
}

fn write_model(w: &mut Writer, m: &ProbModel) {
    w.usize(m.n_features);
    w.f32(m.base);
    let p = &m.params;
    w.usize(p.n_trees);
    w.usize(p.max_depth);
    w.f32(p.learning_rate);
    w.f32(p.lambda);
    w.f32(p.min_child_weight);
    w.usize(p.max_bins);
    w.u64(m.seed);
    w.u8(m.degenerate as u8);
    w.usize(m.trees.len());
    for t in &m.trees {
        w.usize(t.nodes.len());
        for n in &t.nodes {
            w.u32(n.feature);
            w.f32(n.threshold);
            w.u32(n.left);
            w.u32(n.right);
            w.f32(n.value);
        }
    }
}

fn read_model(r: &mut Reader) -> Result<ProbModel> {
    let n_features = r.usize()?;
    let base = r.f32()?;
    let params = GbdtParams {
        n_trees: r.usize()?,
        max_depth: r.usize()?,
        learning_rate: r.f32()?,
        lambda: r.f32()?,
        min_child_weight: r.f32()?,
        max_bins: r.usize()?,
    };
    let seed = r.u64()?;
    let degenerate = r.flag()?;
    let n_trees = r.len(8)?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes = r.len(20)?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let node = Node {
                feature: r.u32()?,
                threshold: r.f32()?,
                left: r.u32()?,
                right: r.u32()?,
                value: r.f32()?,
            };
            // Children always follow their parent, so evaluation terminates.
            if node.feature != u32::MAX
                && ((node.feature as usize) >= n_features
                    || node.left as usize <= i
                    || node.right as usize <= i
                    || node.left as usize >= n_nodes
                    || node.right as usize >= n_nodes)
            {
                return Err(corrupt("tree node"));
            }
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(corrupt("empty tree"));
        }
        trees.push(Tree { nodes });
    }
    Ok(ProbModel {
        n_features,
        base,
        trees,
        params,
        seed,
        degenerate,
    })
}

fn write_opt_model(w: &mut Writer, m: &Option<ProbModel>) {
    w.u8(m.is_some() as u8);
    if let Some(m) = m {
        write_model(w, m);
    }
}

fn read_opt_model(r: &mut Reader) -> Result<Option<ProbModel>> {
    Ok(if r.flag()? { Some(read_model(r)?) } else { None })
}

fn encode(index: &Index) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);

    w.u32(SEC_HEADER);
    write_params(&mut w, &index.params);

    w.u32(SEC_MASK);
    w.u8(index.filter.is_some() as u8);
    if let Some(f) = &index.filter {
        w.bytes(&f.mask().iter().map(|&b| b as u8).collect::<Vec<_>>());
        w.f32s(f.fractions());
        w.f32(f.threshold());
    }

    w.u32(SEC_VECTORS);
    w.usize(index.original.dim());
    w.f32s(index.original.as_slice());

    w.u32(SEC_CENTROIDS);
    let c = &index.clustering;
    w.usize(c.dim());
    w.f32s(c.centroids());
    w.u8(c.normalized_centroids().is_some() as u8);
    if let Some(n) = c.normalized_centroids() {
        w.f32s(n);
    }
    w.u32s(c.assignment());
    w.f64s(c.objective_trace());

    w.u32(SEC_CODEBOOKS);
    let cb = &index.codebooks;
    w.usize(cb.m());
    w.usize(cb.sub_dim());
    w.usize(cb.input_dim());
    w.f32s(cb.tables());

    w.u32(SEC_BLOCKS);
    w.usize(index.blocks.len());
    for cluster in &index.blocks {
        w.usize(cluster.len());
        for b in cluster {
            w.u32s(b.ids());
            w.bytes(b.packed());
        }
    }

    w.u32(SEC_GRAPHS);
    w.u8(index.graphs.is_some() as u8);
    if let Some(gs) = &index.graphs {
        w.usize(gs.len());
        for g in gs {
            w.usize(g.len());
            w.usize(g.degree());
            w.u32(g.entry());
            w.u32s(g.adjacency());
        }
    }

    w.u32(SEC_STATS);
    w.u8(index.stats.is_some() as u8);
    if let Some(ss) = &index.stats {
        w.usize(ss.len());
        for s in ss {
            w.u32(s.size);
            w.f32(s.radius);
            w.f32s(&s.pc1);
            w.f32s(&s.pc2);
            w.f32(s.outlier_cut);
            w.u32s(&s.outliers);
            w.f32s(&s.outlier_direction);
            s.histogram.iter().for_each(|&h| w.u32(h));
            w.u8(s.degenerate as u8);
        }
    }

    w.u32(SEC_MODELS);
    w.u8(index.models.is_some() as u8);
    if let Some(m) = &index.models {
        let p = &m.params;
        w.usize(p.nprob_min);
        w.usize(p.nprob_max);
        w.f32(p.p0);
        w.f32(p.p1);
        w.usize(p.reorder_min);
        w.usize(p.reorder_max);
        w.f32(p.p0_reorder);
        w.f32(p.p1_reorder);
        w.f32(p.theta);
        w.usize(m.t);
        w.usize(m.k);
        write_opt_model(&mut w, &m.nprob);
        write_opt_model(&mut w, &m.reorder);
        write_opt_model(&mut w, &m.prune);
    }

    let sum = XxHash64::oneshot(0, &w.buf);
    w.u64(sum);
    w.buf
}

fn decode(bytes: &[u8]) -> Result<Index> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if XxHash64::oneshot(0, body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: 8 };

    r.section(SEC_HEADER)?;
    let params = read_params(&mut r)?;

    r.section(SEC_MASK)?;
    let filter = if r.flag()? {
        let mask = r.bytes()?.into_iter().map(|b| b != 0).collect();
        let fractions = r.f32s()?;
        let threshold = r.f32()?;
        Some(DimFilter::from_parts(mask, fractions, threshold)?)
    } else {
        None
    };

    r.section(SEC_VECTORS)?;
    let dim = r.usize()?;
    let original = VectorSet::new(dim, params.metric, r.f32s()?)?;
    if let Some(f) = &filter {
        if f.d_original() != dim {
            return Err(corrupt("mask length"));
        }
    }

    r.section(SEC_CENTROIDS)?;
    let cdim = r.usize()?;
    let centroids = r.f32s()?;
    let normalized = if r.flag()? { Some(r.f32s()?) } else { None };
    let assignment = r.u32s()?;
    let trace = r.f64s()?;
    if assignment.len() != original.len() {
        return Err(corrupt("assignment length"));
    }
    let clustering = Clustering::from_parts(cdim, centroids, normalized, assignment)?.with_objective_trace(trace);
    if cdim != filter.as_ref().map_or(dim, |f| f.d_kept()) {
        return Err(corrupt("working dimension"));
    }
    let members = clustering.members();

    r.section(SEC_CODEBOOKS)?;
    let (m, sub_dim, input_dim) = (r.usize()?, r.usize()?, r.usize()?);
    let codebooks = Codebooks::from_parts(m, sub_dim, input_dim, r.f32s()?)?;
    if input_dim != cdim || m % 2 != 0 {
        return Err(corrupt("codebook shape"));
    }

    r.section(SEC_BLOCKS)?;
    if r.usize()? != clustering.k() {
        return Err(corrupt("block cluster count"));
    }
    let mut blocks = Vec::with_capacity(clustering.k());
    for ids in &members {
        let nb = r.len(16)?;
        let mut cluster = Vec::with_capacity(nb);
        let mut seen = Vec::with_capacity(ids.len());
        for _ in 0..nb {
            let bids = r.u32s()?;
            let codes = r.bytes()?;
            let b = CodeBlock::from_parts(bids, codes)?;
            if b.m() != m {
                return Err(corrupt("block width"));
            }
            seen.extend_from_slice(b.ids());
            cluster.push(b);
        }
        if &seen != ids {
            return Err(corrupt("block ids do not match the clustering"));
        }
        blocks.push(cluster);
    }

    r.section(SEC_GRAPHS)?;
    let graphs = if r.flag()? {
        if r.usize()? != clustering.k() {
            return Err(corrupt("graph cluster count"));
        }
        let mut gs = Vec::with_capacity(clustering.k());
        for ids in &members {
            let (len, degree, entry) = (r.usize()?, r.usize()?, r.u32()?);
            if len != ids.len() {
                return Err(corrupt("graph size"));
            }
            gs.push(LeafGraph::from_parts(len, degree, r.u32s()?, entry)?);
        }
        Some(gs)
    } else {
        None
    };

    r.section(SEC_STATS)?;
    let stats = if r.flag()? {
        let n = r.usize()?;
        if n != clustering.k() {
            return Err(corrupt("stats cluster count"));
        }
        let mut ss = Vec::with_capacity(n);
        for _ in 0..n {
            let size = r.u32()?;
            let radius = r.f32()?;
            let pc1 = r.f32s()?;
            let pc2 = r.f32s()?;
            let outlier_cut = r.f32()?;
            let outliers = r.u32s()?;
            let outlier_direction = r.f32s()?;
            let mut histogram = [0u32; HISTOGRAM_BINS];
            for h in histogram.iter_mut() {
                *h = r.u32()?;
            }
            let degenerate = r.flag()?;
            ss.push(ClusterStats {
                size,
                radius,
                pc1,
                pc2,
                outlier_cut,
                outliers,
                outlier_direction,
                histogram,
                degenerate,
            });
        }
        Some(ss)
    } else {
        None
    };

    r.section(SEC_MODELS)?;
    let models = if r.flag()? {
        let params = AdaptiveParams {
            nprob_min: r.usize()?,
            nprob_max: r.usize()?,
            p0: r.f32()?,
            p1: r.f32()?,
            reorder_min: r.usize()?,
            reorder_max: r.usize()?,
            p0_reorder: r.f32()?,
            p1_reorder: r.f32()?,
            theta: r.f32()?,
        };
        let t = r.usize()?;
        let k = r.usize()?;
        Some(AdaptiveModels {
            params,
            t,
            k,
            nprob: read_opt_model(&mut r)?,
            reorder: read_opt_model(&mut r)?,
            prune: read_opt_model(&mut r)?,
        })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Index {
        params,
        original,
        filter,
        clustering,
        members,
        codebooks,
        blocks,
        graphs,
        stats,
        models,
    })
}

pub fn save_index(index: &Index, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(index))?;
    Ok(())
}

/// Reads and fully validates an index file; nothing is returned on error.
pub fn load_index(path: impl AsRef<Path>) -> Result<Index> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::build_index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Index {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = VectorSet::new(
            6,
            Metric::L2,
            (0..64 * 6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let p = IndexParams {
            num_clusters: Some(2),
            graph_degree: Some(4),
            ..IndexParams::new(Metric::L2)
        };
        build_index(&set, &p).unwrap()
    }

    #[test]
    fn round_trip_bytes() {
        let idx = small();
        let bytes = encode(&idx);
        assert_eq!(decode(&bytes).unwrap(), idx);
    }

    #[test]
    fn detects_damage() {
        let bytes = encode(&small());
        assert!(matches!(decode(&bytes[..bytes.len() - 5]), Err(Error::Checksum)));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Checksum)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::BadMagic)));
        let mut version = bytes;
        version[4] = 99;
        assert!(matches!(
            decode(&version),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }
}
