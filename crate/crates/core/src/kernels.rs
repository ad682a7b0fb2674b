//! Blocked LUT16 distance kernels and the candidate pool they feed.
//!
//! Every kernel computes, for each of the 32 slots of a [`CodeBlock`],
//! `acc = sum_j lut[j][code(slot, j)]` with wrapping 16-bit addition, and
//! writes the result in the output layout below. Padding slots read 65535.
//!
//! Output layout: position `p` holds slot `OUTPUT_LAYOUT[p]`, i.e.
//! `(0, 16, 1, 17, ..., 15, 31)`.
//!
//! The vectorized kernels treat several 16-entry tables as one wide virtual
//! register: a pass over one 32-byte code group looks up two tables, a pass
//! over two groups looks up four. Backends:
//!
//! * `Portable`: the virtual register emulated with byte arrays.
//! * `Avx2`: two `pshufb` lookups per pass, one per 128-bit table.
//! * `Avx512Vbmi`: `vpermb` over a 256-bit (two tables) or 512-bit (four
//!   tables) register, i.e. true concatenated-table lookups.

use crate::dataset::Neighbor;
use crate::error::{Error, Result};
use crate::lut::QuantizedLut;
use crate::pq::{CodeBlock, BLOCK_SIZE, CODEBOOK_SIZE};

pub const PADDING_DISTANCE: u16 = u16::MAX;

pub const OUTPUT_LAYOUT: [u8; 32] = [
    0, 16, 1, 17, 2, 18, 3, 19, 4, 20, 5, 21, 6, 22, 7, 23, 8, 24, 9, 25, 10, 26, 11, 27, 12, 28, 13, 29, 14, 30, 15,
    31,
];

/// Position of `slot` in [`OUTPUT_LAYOUT`].
#[inline]
pub const fn layout_position(slot: usize) -> usize {
    if slot < 16 {
        2 * slot
    } else {
        2 * (slot - 16) + 1
    }
}

/// 32 accumulated distances in the output layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDistances {
    values: [u16; 32],
}

impl BlockDistances {
    /// Builds the layout from slot-ordered values.
    pub fn from_slots(by_slot: &[u16; 32]) -> Self {
        let mut values = [0u16; 32];
        for (p, &s) in OUTPUT_LAYOUT.iter().enumerate() {
            values[p] = by_slot[s as usize];
        }
        Self { values }
    }

    #[inline]
    fn from_halves(even: &[u16; 16], odd: &[u16; 16], valid: usize) -> Self {
        let mut by_slot = [PADDING_DISTANCE; 32];
        for t in 0..16 {
            by_slot[2 * t] = even[t];
            by_slot[2 * t + 1] = odd[t];
        }
        for v in by_slot.iter_mut().skip(valid) {
            *v = PADDING_DISTANCE;
        }
        Self::from_slots(&by_slot)
    }

    /// Values in the output layout.
    #[inline]
    pub fn raw(&self) -> &[u16; 32] {
        &self.values
    }

    #[inline]
    pub fn slot(&self, slot: usize) -> u16 {
        self.values[layout_position(slot)]
    }

    pub fn by_slot(&self) -> [u16; 32] {
        let mut out = [0u16; 32];
        for (p, &s) in OUTPUT_LAYOUT.iter().enumerate() {
            out[s as usize] = self.values[p];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LanesPerPass {
    Two,
    Four,
}

impl LanesPerPass {
    pub fn count(self) -> usize {
        match self {
            LanesPerPass::Two => 2,
            LanesPerPass::Four => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Portable,
    Avx2,
    Avx512Vbmi,
}

impl Backend {
    pub fn is_available(self) -> bool {
        match self {
            Backend::Portable => true,
            #[cfg(target_arch = "x86_64")]
            Backend::Avx2 => std::arch::is_x86_feature_detected!("avx2"),
            #[cfg(target_arch = "x86_64")]
            Backend::Avx512Vbmi => {
                std::arch::is_x86_feature_detected!("avx512f")
                    && std::arch::is_x86_feature_detected!("avx512bw")
                    && std::arch::is_x86_feature_detected!("avx512vl")
                    && std::arch::is_x86_feature_detected!("avx512vbmi")
            }
            #[cfg(not(target_arch = "x86_64"))]
            _ => false,
        }
    }
}

pub fn available_backends() -> Vec<Backend> {
    [Backend::Portable, Backend::Avx2, Backend::Avx512Vbmi]
        .into_iter()
        .filter(|b| b.is_available())
        .collect()
}

/// Best backend on this machine.
pub fn probe_backend() -> Backend {
    *available_backends().last().unwrap()
}

/// Four tables per pass only pays off with a real 512-bit table lookup.
pub fn probe_lanes() -> LanesPerPass {
    if Backend::Avx512Vbmi.is_available() {
        LanesPerPass::Four
    } else {
        LanesPerPass::Two
    }
}

fn check_m(qlut: &QuantizedLut, block: &CodeBlock) -> Result<()> {
    if qlut.m() != block.m() {
        return Err(Error::SubspaceMismatch {
            lut: qlut.m(),
            block: block.m(),
        });
    }
    Ok(())
}

/// Reference kernel: one table lookup per (slot, subspace).
pub fn scalar_block_distances(qlut: &QuantizedLut, block: &CodeBlock) -> Result<BlockDistances> {
    check_m(qlut, block)?;
    Ok(scalar_unchecked(qlut, block))
}

fn scalar_unchecked(qlut: &QuantizedLut, block: &CodeBlock) -> BlockDistances {
    let m = block.m();
    let mut by_slot = [PADDING_DISTANCE; 32];
    for (slot, acc) in by_slot.iter_mut().enumerate().take(block.valid_count()) {
        let mut sum = 0u16;
        for j in 0..m {
            sum = sum.wrapping_add(qlut.table(j)[block.code(slot, j) as usize] as u16);
        }
        *acc = sum;
    }
    BlockDistances::from_slots(&by_slot)
}

/// Vectorized kernel on the best available backend.
pub fn vector_block_distances(qlut: &QuantizedLut, block: &CodeBlock, lanes: LanesPerPass) -> Result<BlockDistances> {
    vector_block_distances_with(qlut, block, lanes, probe_backend())
}

pub fn vector_block_distances_with(
    qlut: &QuantizedLut,
    block: &CodeBlock,
    lanes: LanesPerPass,
    backend: Backend,
) -> Result<BlockDistances> {
    check_m(qlut, block)?;
    if !backend.is_available() {
        return Err(Error::InvalidParameter(format!(
            "kernel backend {backend:?} is not supported on this CPU"
        )));
    }
    Ok(dispatch(qlut, block, lanes, backend))
}

#[inline]
fn dispatch(qlut: &QuantizedLut, block: &CodeBlock, lanes: LanesPerPass, backend: Backend) -> BlockDistances {
    let lut = qlut.values();
    let codes = block.packed();
    let m = block.m();
    let (even, odd) = match backend {
        Backend::Portable => match lanes {
            LanesPerPass::Two => portable::two(lut, codes, m),
            LanesPerPass::Four => portable::four(lut, codes, m),
        },
        // SAFETY: callers only select a backend after `is_available()` returned true;
        // both slices hold whole 32-byte code groups / 16-byte tables for `m` subspaces.
        #[cfg(target_arch = "x86_64")]
        Backend::Avx2 => unsafe {
            match lanes {
                LanesPerPass::Two => x86::avx2_two(lut, codes, m),
                LanesPerPass::Four => x86::avx2_four(lut, codes, m),
            }
        },
        #[cfg(target_arch = "x86_64")]
        Backend::Avx512Vbmi => unsafe {
            match lanes {
                LanesPerPass::Two => x86::vbmi_two(lut, codes, m),
                LanesPerPass::Four => x86::vbmi_four(lut, codes, m),
            }
        },
        #[cfg(not(target_arch = "x86_64"))]
        _ => unreachable!("backend availability is checked before dispatch"),
    };
    BlockDistances::from_halves(&even, &odd, block.valid_count())
}

/// A kernel choice fixed for the lifetime of a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Scalar,
    Vector { lanes: LanesPerPass, backend: Backend },
}

impl Kernel {
    /// Fastest kernel on this machine, optionally forcing the lane count.
    pub fn probe(lanes: Option<LanesPerPass>) -> Self {
        Kernel::Vector {
            lanes: lanes.unwrap_or_else(probe_lanes),
            backend: probe_backend(),
        }
    }

    /// Distances for one block. `qlut.m()` must equal `block.m()`.
    #[inline]
    pub fn distances(&self, qlut: &QuantizedLut, block: &CodeBlock) -> BlockDistances {
        debug_assert_eq!(qlut.m(), block.m());
        match *self {
            Kernel::Scalar => scalar_unchecked(qlut, block),
            Kernel::Vector { lanes, backend } => dispatch(qlut, block, lanes, backend),
        }
    }
}

mod portable {
    use super::*;

    /// One pass = one 32-byte code group against a 32-byte virtual register
    /// holding tables `2p` and `2p + 1`.
    #[inline]
    fn pass2(reg: &[u8], codes: &[u8], even: &mut [u16; 16], odd: &mut [u16; 16]) {
        for (b, &c) in codes.iter().enumerate() {
            let sel = (b & 1) * CODEBOOK_SIZE;
            let t = b / 2;
            even[t] = even[t].wrapping_add(reg[sel + (c & 0x0F) as usize] as u16);
            odd[t] = odd[t].wrapping_add(reg[sel + (c >> 4) as usize] as u16);
        }
    }

    pub(super) fn two(lut: &[u8], codes: &[u8], m: usize) -> ([u16; 16], [u16; 16]) {
        let mut even = [0u16; 16];
        let mut odd = [0u16; 16];
        for p in 0..m / 2 {
            pass2(
                &lut[p * 32..p * 32 + 32],
                &codes[p * BLOCK_SIZE..(p + 1) * BLOCK_SIZE],
                &mut even,
                &mut odd,
            );
        }
        (even, odd)
    }

    /// One pass = two code groups against a 64-byte virtual register holding
    /// tables `2p .. 2p + 4`.
    pub(super) fn four(lut: &[u8], codes: &[u8], m: usize) -> ([u16; 16], [u16; 16]) {
        let pairs = m / 2;
        let mut even = [0u16; 16];
        let mut odd = [0u16; 16];
        let mut p = 0;
        while p + 2 <= pairs {
            let reg = &lut[p * 32..p * 32 + 64];
            for (b, &c) in codes[p * BLOCK_SIZE..(p + 2) * BLOCK_SIZE].iter().enumerate() {
                let sel = (b / 32) * 32 + (b & 1) * CODEBOOK_SIZE;
                let t = (b % 32) / 2;
                even[t] = even[t].wrapping_add(reg[sel + (c & 0x0F) as usize] as u16);
                odd[t] = odd[t].wrapping_add(reg[sel + (c >> 4) as usize] as u16);
            }
            p += 2;
        }
        if p < pairs {
            pass2(
                &lut[p * 32..p * 32 + 32],
                &codes[p * BLOCK_SIZE..(p + 1) * BLOCK_SIZE],
                &mut even,
                &mut odd,
            );
        }
        (even, odd)
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use crate::pq::BLOCK_SIZE;

    /// Byte `b` of a 64-byte code pair selects table `(b / 32) * 2 + (b & 1)`.
    static SELECT4: [u8; 64] = {
        let mut s = [0u8; 64];
        let mut b = 0;
        while b < 64 {
            s[b] = ((b / 32) * 32 + (b & 1) * 16) as u8;
            b += 1;
        }
        s
    };

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn store_halves(even: __m256i, odd: __m256i) -> ([u16; 16], [u16; 16]) {
        let mut e = [0u16; 16];
        let mut o = [0u16; 16];
        _mm256_storeu_si256(e.as_mut_ptr().cast(), even);
        _mm256_storeu_si256(o.as_mut_ptr().cast(), odd);
        (e, o)
    }

    /// Adds the two bytes of every 16-bit word into the word accumulator.
    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn fold_bytes(acc: __m256i, r: __m256i) -> __m256i {
        let lo = _mm256_and_si256(r, _mm256_set1_epi16(0x00FF));
        let hi = _mm256_srli_epi16::<8>(r);
        _mm256_add_epi16(acc, _mm256_add_epi16(lo, hi))
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn avx2_pass(lut: *const u8, codes: *const u8, even: &mut __m256i, odd: &mut __m256i) {
        let low = _mm256_set1_epi8(0x0F);
        // pshufb zeroes lanes whose index has bit 7 set.
        let mute_odd = _mm256_set1_epi16(0x8000u16 as i16);
        let mute_even = _mm256_set1_epi16(0x0080);
        let c = _mm256_loadu_si256(codes.cast());
        let lo = _mm256_and_si256(c, low);
        let hi = _mm256_and_si256(_mm256_srli_epi16::<4>(c), low);
        let t0 = _mm256_broadcastsi128_si256(_mm_loadu_si128(lut.cast()));
        let t1 = _mm256_broadcastsi128_si256(_mm_loadu_si128(lut.add(16).cast()));
        let r_lo = _mm256_or_si256(
            _mm256_shuffle_epi8(t0, _mm256_or_si256(lo, mute_odd)),
            _mm256_shuffle_epi8(t1, _mm256_or_si256(lo, mute_even)),
        );
        let r_hi = _mm256_or_si256(
            _mm256_shuffle_epi8(t0, _mm256_or_si256(hi, mute_odd)),
            _mm256_shuffle_epi8(t1, _mm256_or_si256(hi, mute_even)),
        );
        *even = fold_bytes(*even, r_lo);
        *odd = fold_bytes(*odd, r_hi);
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn avx2_two(lut: &[u8], codes: &[u8], m: usize) -> ([u16; 16], [u16; 16]) {
        debug_assert!(lut.len() >= m * 16 && codes.len() >= m / 2 * BLOCK_SIZE);
        let mut even = _mm256_setzero_si256();
        let mut odd = _mm256_setzero_si256();
        for p in 0..m / 2 {
            avx2_pass(
                lut.as_ptr().add(p * 32),
                codes.as_ptr().add(p * BLOCK_SIZE),
                &mut even,
                &mut odd,
            );
        }
        store_halves(even, odd)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn avx2_four(lut: &[u8], codes: &[u8], m: usize) -> ([u16; 16], [u16; 16]) {
        debug_assert!(lut.len() >= m * 16 && codes.len() >= m / 2 * BLOCK_SIZE);
        let pairs = m / 2;
        let mut even0 = _mm256_setzero_si256();
        let mut odd0 = _mm256_setzero_si256();
        let mut even1 = _mm256_setzero_si256();
        let mut odd1 = _mm256_setzero_si256();
        let mut p = 0;
        while p + 2 <= pairs {
            avx2_pass(
                lut.as_ptr().add(p * 32),
                codes.as_ptr().add(p * BLOCK_SIZE),
                &mut even0,
                &mut odd0,
            );
            avx2_pass(
                lut.as_ptr().add(p * 32 + 32),
                codes.as_ptr().add((p + 1) * BLOCK_SIZE),
                &mut even1,
                &mut odd1,
            );
            p += 2;
        }
        if p < pairs {
            avx2_pass(
                lut.as_ptr().add(p * 32),
                codes.as_ptr().add(p * BLOCK_SIZE),
                &mut even0,
                &mut odd0,
            );
        }
        store_halves(_mm256_add_epi16(even0, even1), _mm256_add_epi16(odd0, odd1))
    }

    #[inline]
    #[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi")]
    unsafe fn vbmi_pass2(lut: *const u8, codes: *const u8, even: &mut __m256i, odd: &mut __m256i) {
        let low = _mm256_set1_epi8(0x0F);
        // Odd bytes address the second table of the 32-byte register.
        let select = _mm256_set1_epi16(0x1000);
        let c = _mm256_loadu_si256(codes.cast());
        let lo = _mm256_or_si256(_mm256_and_si256(c, low), select);
        let hi = _mm256_or_si256(_mm256_and_si256(_mm256_srli_epi16::<4>(c), low), select);
        let table = _mm256_loadu_si256(lut.cast());
        *even = fold_bytes(*even, _mm256_permutexvar_epi8(lo, table));
        *odd = fold_bytes(*odd, _mm256_permutexvar_epi8(hi, table));
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi")]
    pub(super) unsafe fn vbmi_two(lut: &[u8], codes: &[u8], m: usize) -> ([u16; 16], [u16; 16]) {
        debug_assert!(lut.len() >= m * 16 && codes.len() >= m / 2 * BLOCK_SIZE);
        let mut even = _mm256_setzero_si256();
        let mut odd = _mm256_setzero_si256();
        for p in 0..m / 2 {
            vbmi_pass2(
                lut.as_ptr().add(p * 32),
                codes.as_ptr().add(p * BLOCK_SIZE),
                &mut even,
                &mut odd,
            );
        }
        store_halves(even, odd)
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vbmi")]
    pub(super) unsafe fn vbmi_four(lut: &[u8], codes: &[u8], m: usize) -> ([u16; 16], [u16; 16]) {
        debug_assert!(lut.len() >= m * 16 && codes.len() >= m / 2 * BLOCK_SIZE);
        let pairs = m / 2;
        let low = _mm512_set1_epi8(0x0F);
        let byte = _mm512_set1_epi16(0x00FF);
        let select = _mm512_loadu_si512(SELECT4.as_ptr().cast());
        let mut even = _mm512_setzero_si512();
        let mut odd = _mm512_setzero_si512();
        let mut p = 0;
        while p + 2 <= pairs {
            let c = _mm512_loadu_si512(codes.as_ptr().add(p * BLOCK_SIZE).cast());
            let lo = _mm512_or_si512(_mm512_and_si512(c, low), select);
            let hi = _mm512_or_si512(_mm512_and_si512(_mm512_srli_epi16::<4>(c), low), select);
            let table = _mm512_loadu_si512(lut.as_ptr().add(p * 32).cast());
            let r_lo = _mm512_permutexvar_epi8(lo, table);
            let r_hi = _mm512_permutexvar_epi8(hi, table);
            even = _mm512_add_epi16(
                even,
                _mm512_add_epi16(_mm512_and_si512(r_lo, byte), _mm512_srli_epi16::<8>(r_lo)),
            );
            odd = _mm512_add_epi16(
                odd,
                _mm512_add_epi16(_mm512_and_si512(r_hi, byte), _mm512_srli_epi16::<8>(r_hi)),
            );
            p += 2;
        }
        let mut even = _mm256_add_epi16(_mm512_castsi512_si256(even), _mm512_extracti64x4_epi64::<1>(even));
        let mut odd = _mm256_add_epi16(_mm512_castsi512_si256(odd), _mm512_extracti64x4_epi64::<1>(odd));
        if p < pairs {
            vbmi_pass2(
                lut.as_ptr().add(p * 32),
                codes.as_ptr().add(p * BLOCK_SIZE),
                &mut even,
                &mut odd,
            );
        }
        store_halves(even, odd)
    }
}

/// Bounded set of the `capacity` best `(distance, id)` pairs seen so far.
///
/// Candidates are appended to a buffer and the buffer is cut back to
/// `capacity` (sorted, duplicates removed) whenever it doubles, so the
/// admission threshold only ever tightens. The final contents depend only on
/// the multiset of offered candidates, not on their order.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    capacity: usize,
    buf: Vec<Neighbor>,
    bound: Option<Neighbor>,
}

impl CandidatePool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "pool capacity must be at least 1");
        Self {
            capacity,
            buf: Vec::with_capacity(capacity.min(1 << 16) * 2),
            bound: None,
        }
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Offers one candidate.
    #[inline]
    pub fn push(&mut self, c: Neighbor) {
        if let Some(b) = self.bound {
            if c.cmp_key(&b).is_gt() {
                return;
            }
        }
        self.buf.push(c);
        if self.buf.len() >= 2 * self.capacity {
            self.compact();
        }
    }

    fn compact(&mut self) {
        self.buf.sort_unstable_by(Neighbor::cmp_key);
        self.buf.dedup_by(|a, b| a.id == b.id && a.distance == b.distance);
        self.buf.truncate(self.capacity);
        if self.buf.len() == self.capacity {
            self.bound = self.buf.last().copied();
        }
    }

    /// Distance of the current worst member once the pool is full, `None`
    /// while it still has room.
    pub fn worst(&mut self) -> Option<f32> {
        if self.buf.len() >= self.capacity {
            self.compact();
        }
        self.bound.map(|b| b.distance)
    }

    /// Admission bound: candidates farther than this can never enter.
    #[inline]
    pub fn bound(&self) -> f32 {
        self.bound.map_or(f32::INFINITY, |b| b.distance)
    }

    pub fn len(&mut self) -> usize {
        self.compact();
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Current members, best first.
    pub fn snapshot(&mut self) -> &[Neighbor] {
        self.compact();
        &self.buf
    }

    pub fn into_sorted(mut self) -> Vec<Neighbor> {
        self.compact();
        self.buf
    }
}

/// Merges one block's distances into `pool`. Slots are filtered against the
/// pool bound in the quantized domain first; survivors are dequantized with
/// `qlut` and offered. Padding slots never enter.
pub fn update_pool(pool: &mut CandidatePool, dists: &BlockDistances, ids: &[u32], qlut: &QuantizedLut) {
    update_pool_masked(pool, dists, ids, qlut, None);
}

/// [`update_pool`] with an optional per-slot keep mask.
#[inline]
pub fn update_pool_masked(
    pool: &mut CandidatePool,
    dists: &BlockDistances,
    ids: &[u32],
    qlut: &QuantizedLut,
    keep: Option<&[bool]>,
) {
    let limit = qlut.quantize_bound(pool.bound());
    let mut pass = 0u32;
    for (p, &v) in dists.raw().iter().enumerate() {
        pass |= ((v <= limit) as u32) << p;
    }
    while pass != 0 {
        let p = pass.trailing_zeros() as usize;
        pass &= pass - 1;
        let slot = OUTPUT_LAYOUT[p] as usize;
        if slot >= ids.len() || keep.is_some_and(|k| !k[slot]) {
            continue;
        }
        pool.push(Neighbor {
            id: ids[slot],
            distance: qlut.dequantize(dists.raw()[p]),
        });
    }
}

/// A pool entry still in the accumulator domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawCandidate {
    pub acc: u16,
    pub id: u32,
}

/// `scale * acc + sum(bias) + offset` for every entry.
pub fn dequantize_pool(raw: &[RawCandidate], qlut: &QuantizedLut) -> Vec<Neighbor> {
    raw.iter()
        .map(|c| Neighbor {
            id: c.id,
            distance: qlut.dequantize(c.acc),
        })
        .collect()
}
