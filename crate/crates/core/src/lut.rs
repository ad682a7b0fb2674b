//! Per-query asymmetric distance tables and their 8-bit quantization.

use crate::dataset::{dot, l2_squared, Metric};
use crate::error::{Error, Result};
use crate::pq::{Codebooks, CODEBOOK_SIZE};

const SCALE_FLOOR: f32 = 1e-12;

/// `m x 16` partial distances between query sub-vectors and sub-centroids,
/// plus a constant added to every approximate distance.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLut {
    m: usize,
    values: Vec<f32>,
    offset: f32,
}

impl FloatLut {
    pub fn new(m: usize, values: Vec<f32>, offset: f32) -> Result<Self> {
        if values.len() != m * CODEBOOK_SIZE {
            return Err(Error::InvalidParameter(format!(
                "LUT needs {} entries, got {}",
                m * CODEBOOK_SIZE,
                values.len()
            )));
        }
        Ok(Self { m, values, offset })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn table(&self, j: usize) -> &[f32] {
        &self.values[j * CODEBOOK_SIZE..(j + 1) * CODEBOOK_SIZE]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn offset(&self) -> f32 {
        self.offset
    }

    pub fn with_offset(mut self, offset: f32) -> Self {
        self.offset = offset;
        self
    }

    /// Approximate distance of a point with the given codes.
    pub fn sum(&self, codes: &[u8]) -> f32 {
        codes
            .iter()
            .enumerate()
            .map(|(j, &c)| self.values[j * CODEBOOK_SIZE + c as usize])
            .sum::<f32>()
            + self.offset
    }
}

/// Builds the table for a (residual) query. Entries are squared L2 for the L2
/// and angular metrics and `-<q^j, c^j_i>` for inner product.
pub fn compute_float_lut(q: &[f32], codebooks: &Codebooks, metric: Metric) -> Result<FloatLut> {
    if q.len() > codebooks.padded_dim() || q.len() < codebooks.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: codebooks.padded_dim(),
            actual: q.len(),
        });
    }
    let padded;
    let q = if q.len() == codebooks.padded_dim() {
        q
    } else {
        padded = codebooks.pad(q);
        &padded
    };
    let sd = codebooks.sub_dim();
    let mut values = Vec::with_capacity(codebooks.m() * CODEBOOK_SIZE);
    for j in 0..codebooks.m() {
        let sub = &q[j * sd..(j + 1) * sd];
        for i in 0..CODEBOOK_SIZE {
            let c = codebooks.centroid(j, i);
            values.push(match metric {
                Metric::InnerProduct => -dot(sub, c),
                Metric::L2 | Metric::Angular => l2_squared(sub, c),
            });
        }
    }
    FloatLut::new(codebooks.m(), values, 0.0)
}

/// 8-bit table with affine dequantization `scale * acc + sum(bias) + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLut {
    m: usize,
    values: Vec<u8>,
    scale: f32,
    bias: Vec<f32>,
    bias_sum: f32,
    offset: f32,
    clamp_count: usize,
}

impl QuantizedLut {
    /// Table from raw parts (bias zero). Mostly useful for kernel tests.
    pub fn from_raw(m: usize, values: Vec<u8>, scale: f32) -> Result<Self> {
        if values.len() != m * CODEBOOK_SIZE {
            return Err(Error::InvalidParameter(format!(
                "LUT needs {} entries, got {}",
                m * CODEBOOK_SIZE,
                values.len()
            )));
        }
        Ok(Self {
            m,
            values,
            scale,
            bias: vec![0.0; m],
            bias_sum: 0.0,
            offset: 0.0,
            clamp_count: 0,
        })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    /// All tables, contiguous by subspace: `d_{0,0} .. d_{0,15}, d_{1,0} ..`.
    #[inline]
    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn table(&self, j: usize) -> &[u8] {
        &self.values[j * CODEBOOK_SIZE..(j + 1) * CODEBOOK_SIZE]
    }

    #[inline]
    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// `sum(bias) + offset`: the float value of an all-zero accumulator.
    #[inline]
    pub fn zero_point(&self) -> f32 {
        self.bias_sum + self.offset
    }

    #[inline]
    pub fn offset(&self) -> f32 {
        self.offset
    }

    /// Replaces the constant added to every dequantized distance.
    pub fn set_offset(&mut self, offset: f32) {
        self.offset = offset;
    }

    #[inline]
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    #[inline]
    pub fn dequantize(&self, acc: u16) -> f32 {
        self.scale * acc as f32 + self.zero_point()
    }

    /// Largest accumulator value whose dequantized distance can still be
    /// `<= bound`, saturating at 0 / 65535.
    #[inline]
    pub fn quantize_bound(&self, bound: f32) -> u16 {
        let t = ((bound - self.zero_point()) / self.scale).ceil() + 1.0;
        if t.is_nan() || t >= 65535.0 {
            u16::MAX
        } else if t <= 0.0 {
            0
        } else {
            t as u16
        }
    }

    /// Reference accumulation (no wrap-around concerns at valid scales).
    pub fn accumulate(&self, codes: &[u8]) -> u32 {
        codes
            .iter()
            .enumerate()
            .map(|(j, &c)| self.values[j * CODEBOOK_SIZE + c as usize] as u32)
            .sum()
    }
}

/// Per-table bias (the table minimum) and one global scale.
///
/// The scale is the smallest step for which no entry exceeds 255 and the sum
/// of the per-table maxima stays below 65535 even after rounding, so a 16-bit
/// accumulator over all `m` tables never wraps.
pub fn quantize_lut(flut: &FloatLut) -> QuantizedLut {
    let m = flut.m();
    let mut bias = Vec::with_capacity(m);
    let mut max_range = 0f32;
    let mut total_range = 0f64;
    for j in 0..m {
        let t = flut.table(j);
        let lo = t.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = t.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        bias.push(lo);
        max_range = max_range.max(hi - lo);
        total_range += (hi - lo) as f64;
    }
    let headroom = (u16::MAX as usize).saturating_sub(m).max(1) as f64;
    let scale = (max_range / 255.0)
        .max((total_range / headroom) as f32)
        .max(SCALE_FLOOR);
    let mut clamp_count = 0;
    let mut values = Vec::with_capacity(m * CODEBOOK_SIZE);
    for (j, &b) in bias.iter().enumerate().take(m) {
        for &v in flut.table(j) {
            let q = ((v - b) / scale).round();
            if !(0.0..=255.0).contains(&q) {
                clamp_count += 1;
            }
            values.push(q.clamp(0.0, 255.0) as u8);
        }
    }
    let bias_sum = bias.iter().map(|&b| b as f64).sum::<f64>() as f32;
    QuantizedLut {
        m,
        values,
        scale,
        bias,
        bias_sum,
        offset: flut.offset(),
        clamp_count,
    }
}
