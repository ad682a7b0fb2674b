//! 4-bit product quantization: residuals, 16-centroid sub-codebooks,
//! encoding, and the 32-point interleaved block layout consumed by the
//! LUT16 kernels.
//!
//! Block layout (32 bytes per pair of subspaces, `m/2` pairs):
//!
//! ```text
//! pair p   | byte 0     | byte 1     | byte 2     | byte 3     | ... | byte 30     | byte 31     |
//! low  4b  | v0, sub 2p | v0, sub2p+1| v2, sub 2p | v2, sub2p+1| ... | v30, sub 2p | v30,sub2p+1 |
//! high 4b  | v1, sub 2p | v1, sub2p+1| v3, sub 2p | v3, sub2p+1| ... | v31, sub 2p | v31,sub2p+1 |
//! ```
//!
//! Slots past `valid_count` hold code 15 in every subspace.

use rayon::prelude::*;

use crate::dataset::{l2_squared, Metric, VectorSet};
use crate::error::{Error, Result};
use crate::kmeans::{train_kmeans, Clustering, KMeansConfig};

pub const CODEBOOK_SIZE: usize = 16;
pub const BLOCK_SIZE: usize = 32;
pub const PADDING_CODE: u8 = 15;
pub const DEFAULT_SUB_DIM: usize = 2;

/// Which centroid residuals are taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// `x - mean(cluster)`.
    RawMean,
    /// `x - mean(cluster) / |mean(cluster)|`.
    Normalized,
    /// No residual: `x` itself is quantized.
    None,
}

impl ResidualMode {
    pub(crate) fn tag(self) -> u8 {
        match self {
            ResidualMode::RawMean => 0,
            ResidualMode::Normalized => 1,
            ResidualMode::None => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ResidualMode::RawMean),
            1 => Some(ResidualMode::Normalized),
            2 => Some(ResidualMode::None),
            _ => None,
        }
    }

    /// The centroid residuals of cluster `j` are taken against, if any.
    pub fn reference(self, clustering: &Clustering, j: usize) -> Option<&[f32]> {
        match self {
            ResidualMode::RawMean => Some(clustering.centroid(j)),
            ResidualMode::Normalized => Some(clustering.normalized_centroid(j)),
            ResidualMode::None => None,
        }
    }
}

pub fn compute_residuals(set: &VectorSet, clustering: &Clustering, mode: ResidualMode) -> Result<VectorSet> {
    if set.len() != clustering.assignment().len() {
        return Err(Error::InvalidParameter(format!(
            "{} points but {} assignments",
            set.len(),
            clustering.assignment().len()
        )));
    }
    if mode == ResidualMode::Normalized && clustering.normalized_centroids().is_none() {
        let with = clustering.clone().with_normalized();
        return compute_residuals(set, &with, mode);
    }
    let mut data = Vec::with_capacity(set.len() * set.dim());
    for (x, &a) in set.rows().zip(clustering.assignment()) {
        match mode.reference(clustering, a as usize) {
            Some(c) => data.extend(x.iter().zip(c).map(|(v, c)| v - c)),
            None => data.extend_from_slice(x),
        }
    }
    VectorSet::new(set.dim(), set.metric(), data)
}

/// Number of subspaces for `dim` input dimensions: `ceil(dim / sub_dim)`,
/// rounded up to an even count so blocks always hold whole subspace pairs.
pub fn subspace_count(dim: usize, sub_dim: usize) -> usize {
    let m = dim.div_ceil(sub_dim.max(1));
    m + (m % 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    m: usize,
    sub_dim: usize,
    input_dim: usize,
    /// `m * 16 * sub_dim` floats: subspace-major, then centroid, then component.
    tables: Vec<f32>,
}

impl Codebooks {
    pub(crate) fn from_parts(m: usize, sub_dim: usize, input_dim: usize, tables: Vec<f32>) -> Result<Self> {
        if m == 0 || sub_dim == 0 || tables.len() != m * CODEBOOK_SIZE * sub_dim || m * sub_dim < input_dim {
            return Err(Error::InvalidParameter("malformed codebooks".into()));
        }
        Ok(Self {
            m,
            sub_dim,
            input_dim,
            tables,
        })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn padded_dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn tables(&self) -> &[f32] {
        &self.tables
    }

    /// Centroid `i` of subspace `j`.
    #[inline]
    pub fn centroid(&self, j: usize, i: usize) -> &[f32] {
        let off = (j * CODEBOOK_SIZE + i) * self.sub_dim;
        &self.tables[off..off + self.sub_dim]
    }

    /// Zero-pads `v` to `m * sub_dim` components.
    pub fn pad(&self, v: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; self.padded_dim()];
        out[..v.len()].copy_from_slice(v);
        out
    }

    /// Concatenated centroids for `codes` (padded dimensionality).
    pub fn decode(&self, codes: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.padded_dim());
        for (j, &c) in codes.iter().enumerate() {
            out.extend_from_slice(self.centroid(j, c as usize));
        }
        out
    }
}

/// Trains one 16-centroid k-means per subspace. Sub-vectors are zero padded
/// when `m` does not divide the dimension.
pub fn train_codebooks(residuals: &VectorSet, m: usize, config: &KMeansConfig) -> Result<Codebooks> {
    if residuals.len() < CODEBOOK_SIZE {
        return Err(Error::NotEnoughPoints {
            requested: CODEBOOK_SIZE,
            available: residuals.len(),
        });
    }
    if m == 0 {
        return Err(Error::InvalidParameter("m must be at least 1".into()));
    }
    let dim = residuals.dim();
    let sub_dim = dim.div_ceil(m);
    let n = residuals.len();
    let per_subspace: Vec<Result<Vec<f32>>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut slice = vec![0f32; n * sub_dim];
            for (dst, x) in slice.chunks_exact_mut(sub_dim).zip(residuals.rows()) {
                for (t, d) in dst.iter_mut().enumerate() {
                    if let Some(&v) = x.get(j * sub_dim + t) {
                        *d = v;
                    }
                }
            }
            let cfg = KMeansConfig {
                seed: config.seed.wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                ..*config
            };
            Ok(train_kmeans(&slice, sub_dim, CODEBOOK_SIZE, &cfg)?.centroids().to_vec())
        })
        .collect();
    let mut tables = Vec::with_capacity(m * CODEBOOK_SIZE * sub_dim);
    for t in per_subspace {
        tables.extend(t?);
    }
    Codebooks::from_parts(m, sub_dim, dim, tables)
}

/// Nearest sub-centroid index per subspace; ties to the smaller index.
pub fn encode(residual: &[f32], codebooks: &Codebooks) -> Result<Vec<u8>> {
    if residual.len() > codebooks.padded_dim() {
        return Err(Error::DimensionMismatch {
            expected: codebooks.padded_dim(),
            actual: residual.len(),
        });
    }
    let padded;
    let v = if residual.len() == codebooks.padded_dim() {
        residual
    } else {
        padded = codebooks.pad(residual);
        &padded
    };
    let sd = codebooks.sub_dim;
    Ok((0..codebooks.m)
        .map(|j| {
            let sub = &v[j * sd..(j + 1) * sd];
            let mut best = 0u8;
            let mut best_d = f32::INFINITY;
            for i in 0..CODEBOOK_SIZE {
                let d = l2_squared(sub, codebooks.centroid(j, i));
                if d < best_d {
                    best_d = d;
                    best = i as u8;
                }
            }
            best
        })
        .collect())
}

/// Encodes every row of `set`; returns `len * m` codes.
pub fn encode_all(set: &VectorSet, codebooks: &Codebooks) -> Result<Vec<u8>> {
    let rows: Vec<Result<Vec<u8>>> = (0..set.len())
        .into_par_iter()
        .map(|i| encode(set.row(i), codebooks))
        .collect();
    let mut out = Vec::with_capacity(set.len() * codebooks.m);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Up to 32 points with their 4-bit codes in the interleaved layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    ids: Vec<u32>,
    codes: Vec<u8>,
}

impl CodeBlock {
    pub(crate) fn from_parts(ids: Vec<u32>, codes: Vec<u8>) -> Result<Self> {
        if ids.len() > BLOCK_SIZE || !codes.len().is_multiple_of(BLOCK_SIZE) || codes.is_empty() {
            return Err(Error::InvalidParameter("malformed code block".into()));
        }
        Ok(Self { ids, codes })
    }

    /// Global ids of the valid slots, in slot order.
    #[inline]
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn valid_count(&self) -> usize {
        self.ids.len()
    }

    /// Number of subspaces (always even).
    #[inline]
    pub fn m(&self) -> usize {
        self.codes.len() / (BLOCK_SIZE / 2)
    }

    /// Raw packed bytes: `m / 2` groups of 32.
    #[inline]
    pub fn packed(&self) -> &[u8] {
        &self.codes
    }

    /// Code of `slot` in subspace `sub`.
    #[inline]
    pub fn code(&self, slot: usize, sub: usize) -> u8 {
        let byte = self.codes[byte_index(slot, sub)];
        if slot.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }

    /// A block with no valid slots: every code is the padding code.
    pub fn padded(m: usize) -> Self {
        Self {
            ids: Vec::with_capacity(BLOCK_SIZE),
            codes: vec![PADDING_CODE | (PADDING_CODE << 4); m / 2 * BLOCK_SIZE],
        }
    }

    /// Resets every slot to padding.
    pub fn clear(&mut self) {
        self.ids.clear();
        self.codes.fill(PADDING_CODE | (PADDING_CODE << 4));
    }

    pub fn is_full(&self) -> bool {
        self.ids.len() == BLOCK_SIZE
    }

    /// Copies the codes of `src`'s slot `src_slot` into the next free slot.
    pub fn push_from(&mut self, src: &CodeBlock, src_slot: usize, id: u32) {
        let slot = self.ids.len();
        assert!(slot < BLOCK_SIZE, "block is full");
        debug_assert_eq!(src.m(), self.m());
        for sub in 0..self.m() {
            let c = src.code(src_slot, sub);
            let b = &mut self.codes[byte_index(slot, sub)];
            *b = if slot.is_multiple_of(2) {
                (*b & 0xF0) | c
            } else {
                (*b & 0x0F) | (c << 4)
            };
        }
        self.ids.push(id);
    }

    /// Codes of the valid slots, `valid_count * m`, point-major.
    pub fn unpack(&self) -> Vec<u8> {
        let m = self.m();
        let mut out = Vec::with_capacity(self.valid_count() * m);
        for slot in 0..self.valid_count() {
            for sub in 0..m {
                out.push(self.code(slot, sub));
            }
        }
        out
    }
}

#[inline]
fn byte_index(slot: usize, sub: usize) -> usize {
    (sub / 2) * BLOCK_SIZE + (slot / 2) * 2 + (sub % 2)
}

/// Packs point-major `codes` (`ids.len() * m` values) into `ceil(n / 32)` blocks.
pub fn pack_blocks(codes: &[u8], ids: &[u32], m: usize) -> Result<Vec<CodeBlock>> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "blocks need an even, non-zero subspace count (got {m})"
        )));
    }
    if codes.len() != ids.len() * m {
        return Err(Error::InvalidParameter(format!(
            "{} codes for {} points with m = {m}",
            codes.len(),
            ids.len()
        )));
    }
    if let Some(&code) = codes.iter().find(|&&c| c >= CODEBOOK_SIZE as u8) {
        return Err(Error::CodeOutOfRange { code });
    }
    Ok(ids
        .chunks(BLOCK_SIZE)
        .zip(codes.chunks(BLOCK_SIZE * m))
        .map(|(block_ids, block_codes)| {
            let mut packed = vec![0u8; m / 2 * BLOCK_SIZE];
            for slot in 0..BLOCK_SIZE {
                for sub in 0..m {
                    let code = if slot < block_ids.len() {
                        block_codes[slot * m + sub]
                    } else {
                        PADDING_CODE
                    };
                    let b = &mut packed[byte_index(slot, sub)];
                    if slot % 2 == 0 {
                        *b |= code;
                    } else {
                        *b |= code << 4;
                    }
                }
            }
            CodeBlock {
                ids: block_ids.to_vec(),
                codes: packed,
            }
        })
        .collect())
}

/// Sum of squared reconstruction errors `|r - decode(encode(r))|^2`.
pub fn reconstruction_error(residuals: &VectorSet, codebooks: &Codebooks) -> Result<f64> {
    let errs: Vec<Result<f64>> = (0..residuals.len())
        .into_par_iter()
        .map(|i| {
            let r = codebooks.pad(residuals.row(i));
            let codes = encode(&r, codebooks)?;
            Ok(l2_squared(&r, &codebooks.decode(&codes)) as f64)
        })
        .collect();
    errs.into_iter().sum()
}

/// Metric used for PQ-level scoring of residuals: inner product stays inner
/// product, everything else is squared L2.
pub fn pq_metric(metric: Metric) -> Metric {
    match metric {
        Metric::InnerProduct => Metric::InnerProduct,
        _ => Metric::L2,
    }
}
