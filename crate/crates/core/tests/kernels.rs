use leafann::dataset::Neighbor;
use leafann::kernels::{
    available_backends, scalar_block_distances, update_pool, vector_block_distances_with, CandidatePool, Kernel,
    LanesPerPass, PADDING_DISTANCE,
};
use leafann::lut::{quantize_lut, FloatLut, QuantizedLut};
use leafann::pq::{pack_blocks, CodeBlock};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct sum over point-major codes, wrapping at 16 bits like the kernels.
fn oracle(lut: &[u8], codes: &[u8], m: usize) -> Vec<u16> {
    codes
        .chunks_exact(m)
        .map(|c| {
            c.iter().enumerate().fold(0u16, |acc, (j, &code)| {
                acc.wrapping_add(lut[j * 16 + code as usize] as u16)
            })
        })
        .collect()
}

fn random_case(rng: &mut ChaCha8Rng, m: usize, valid: usize) -> (QuantizedLut, CodeBlock, Vec<u16>) {
    let lut: Vec<u8> = (0..m * 16).map(|_| rng.random()).collect();
    let codes: Vec<u8> = (0..valid * m).map(|_| rng.random_range(0..16)).collect();
    let ids: Vec<u32> = (0..valid as u32).collect();
    let want = oracle(&lut, &codes, m);
    let block = pack_blocks(&codes, &ids, m).unwrap().remove(0);
    (QuantizedLut::from_raw(m, lut, 1.0).unwrap(), block, want)
}

fn kernels() -> Vec<Kernel> {
    let mut out = vec![Kernel::Scalar];
    for backend in available_backends() {
        for lanes in [LanesPerPass::Two, LanesPerPass::Four] {
            out.push(Kernel::Vector { lanes, backend });
        }
    }
    out
}

fn check(kernel: Kernel, q: &QuantizedLut, block: &CodeBlock, want: &[u16]) {
    let got = kernel.distances(q, block);
    for slot in 0..32 {
        let expect = want.get(slot).copied().unwrap_or(PADDING_DISTANCE);
        assert_eq!(got.slot(slot), expect, "{kernel:?} slot {slot} m {}", block.m());
    }
}

#[test]
fn all_kernels_match_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let m = 2 * rng.random_range(1..=40);
        let valid = rng.random_range(1..=32);
        let (q, block, want) = random_case(&mut rng, m, valid);
        for k in kernels() {
            check(k, &q, &block, &want);
        }
        if i % 100 == 0 {
            let scalar = scalar_block_distances(&q, &block).unwrap();
            for backend in available_backends() {
                let v = vector_block_distances_with(&q, &block, LanesPerPass::Four, backend).unwrap();
                assert_eq!(v, scalar);
            }
        }
    }
}

#[test]
fn mismatched_subspaces_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, _, _) = random_case(&mut rng, 4, 3);
    let (_, block, _) = random_case(&mut rng, 6, 3);
    assert!(scalar_block_distances(&q, &block).is_err());
}

fn float_case(rng: &mut ChaCha8Rng, m: usize) -> FloatLut {
    FloatLut::new(m, (0..m * 16).map(|_| rng.random_range(0.0f32..50.0)).collect(), 3.5).unwrap()
}

#[test]
fn dequantized_sum_is_within_half_step_per_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let m = 2 * rng.random_range(1..=32);
        let f = float_case(&mut rng, m);
        let q = quantize_lut(&f);
        assert_eq!(q.clamp_count(), 0);
        for _ in 0..20 {
            let codes: Vec<u8> = (0..m).map(|_| rng.random_range(0..16)).collect();
            let acc = q.accumulate(&codes);
            assert!(acc <= u16::MAX as u32);
            let err = (q.dequantize(acc as u16) - f.sum(&codes)).abs();
            let tol = q.scale() * m as f32 / 2.0 + 1e-3 * f.sum(&codes).abs().max(1.0);
            assert!(err <= tol, "err {err} tol {tol}");
        }
    }
}

/// Every point of `n_blocks` random blocks through `update_pool`, compared with
/// a global sort of the dequantized distances.
#[test]
fn pool_equals_global_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = 16;
    let f = float_case(&mut rng, m);
    let q = quantize_lut(&f);
    let n = 100 * 32 - 7;
    let codes: Vec<u8> = (0..n * m).map(|_| rng.random_range(0..16)).collect();
    let ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
    let blocks = pack_blocks(&codes, &ids, m).unwrap();
    assert_eq!(blocks.len(), 100);
    let mut all: Vec<Neighbor> = codes
        .chunks_exact(m)
        .zip(&ids)
        .map(|(c, &id)| Neighbor {
            id,
            distance: q.dequantize(q.accumulate(c) as u16),
        })
        .collect();
    all.sort_by(Neighbor::cmp_key);
    for kernel in kernels() {
        for cap in [1usize, 10, 100, 1000] {
            let mut pool = CandidatePool::new(cap);
            for b in &blocks {
                update_pool(&mut pool, &kernel.distances(&q, b), b.ids(), &q);
            }
            assert_eq!(pool.into_sorted(), all[..cap].to_vec(), "{kernel:?} cap {cap}");
        }
    }

    // Block order does not matter.
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut rng);
    let mut pool = CandidatePool::new(50);
    for &i in &order {
        update_pool(
            &mut pool,
            &Kernel::probe(None).distances(&q, &blocks[i]),
            blocks[i].ids(),
            &q,
        );
    }
    assert_eq!(pool.into_sorted(), all[..50].to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn vector_kernels_equal_oracle(seed in any::<u64>(), half_m in 1usize..=64, valid in 1usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, block, want) = random_case(&mut rng, 2 * half_m, valid);
        for k in kernels() {
            let got = k.distances(&q, &block);
            for (slot, &w) in want.iter().enumerate() {
                prop_assert_eq!(got.slot(slot), w);
            }
            for slot in valid..32 {
                prop_assert_eq!(got.slot(slot), PADDING_DISTANCE);
            }
        }
    }

    #[test]
    fn pool_keeps_the_best_regardless_of_order(
        dists in prop::collection::vec(0u32..1000, 1..300),
        cap in 1usize..40,
        seed in any::<u64>(),
    ) {
        let items: Vec<Neighbor> = dists
            .iter()
            .enumerate()
            .map(|(i, &d)| Neighbor { id: i as u32, distance: d as f32 })
            .collect();
        let mut sorted = items.clone();
        sorted.sort_by(Neighbor::cmp_key);
        sorted.truncate(cap);
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for input in [&items, &shuffled] {
            let mut pool = CandidatePool::new(cap);
            for &c in input.iter() {
                pool.push(c);
            }
            prop_assert_eq!(pool.into_sorted(), sorted.clone());
        }
    }
}
