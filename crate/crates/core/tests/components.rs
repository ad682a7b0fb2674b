use leafann::adaptive::{
    auc, build_cluster_stats, interpolate, interpolate_nprob, train_prob_model, AdaptiveParams, GbdtParams,
    HISTOGRAM_BINS,
};
use leafann::dataset::{l2_squared, Metric, Neighbor, VectorSet};
use leafann::filtration::{compute_dim_stats, select_dims};
use leafann::kernels::Kernel;
use leafann::kmeans::{train_kmeans, KMeansConfig};
use leafann::leafgraph::{build_leaf_graph, graph_search, NO_NEIGHBOR};
use leafann::lut::{compute_float_lut, quantize_lut};
use leafann::pq::{encode, encode_all, pack_blocks, train_codebooks, BLOCK_SIZE, PADDING_CODE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, dim: usize, seed: u64) -> VectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorSet::new(
        dim,
        Metric::L2,
        (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

#[test]
fn block_packing_round_trips_every_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=97usize {
        let m = 2 * rng.random_range(1..=12);
        let codes: Vec<u8> = (0..n * m).map(|_| rng.random_range(0..16)).collect();
        let ids: Vec<u32> = (0..n as u32).map(|i| 1000 + i).collect();
        let blocks = pack_blocks(&codes, &ids, m).unwrap();
        assert_eq!(blocks.len(), n.div_ceil(BLOCK_SIZE));
        for (b, block) in blocks.iter().enumerate() {
            assert_eq!(block.m(), m);
            assert_eq!(block.packed().len(), m / 2 * 32);
            for slot in 0..BLOCK_SIZE {
                let point = b * BLOCK_SIZE + slot;
                for sub in 0..m {
                    let want = if point < n {
                        codes[point * m + sub]
                    } else {
                        PADDING_CODE
                    };
                    assert_eq!(block.code(slot, sub), want);
                    // Raw byte layout: even slots in the low nibble, odd slots in the high nibble.
                    let byte = block.packed()[(sub / 2) * 32 + (slot / 2) * 2 + sub % 2];
                    let nib = if slot % 2 == 0 { byte & 15 } else { byte >> 4 };
                    assert_eq!(nib, want);
                }
            }
        }
        let ids_back: Vec<u32> = blocks.iter().flat_map(|b| b.ids().to_vec()).collect();
        assert_eq!(ids_back, ids);
    }
    assert!(pack_blocks(&[1, 2, 3], &[0], 3).is_err());
    assert!(pack_blocks(&[16, 0], &[0], 2).is_err());
}

#[test]
fn encoding_picks_nearest_subcentroid() {
    let set = gaussian(2000, 10, 4);
    let cb = train_codebooks(&set, 6, &KMeansConfig::default()).unwrap();
    assert_eq!(cb.padded_dim(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let v: Vec<f32> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let codes = encode(&v, &cb).unwrap();
        let p = cb.pad(&v);
        for j in 0..6 {
            let sub = &p[j * 2..j * 2 + 2];
            let chosen = l2_squared(sub, cb.centroid(j, codes[j] as usize));
            for i in 0..16 {
                assert!(chosen <= l2_squared(sub, cb.centroid(j, i)));
            }
        }
    }
}

#[test]
fn float_lut_sum_is_distance_to_reconstruction() {
    let set = gaussian(1500, 8, 6);
    let cb = train_codebooks(&set, 4, &KMeansConfig::default()).unwrap();
    let codes = encode_all(&set, &cb).unwrap();
    let q = gaussian(1, 8, 99);
    let q = q.row(0);
    let l2 = compute_float_lut(q, &cb, Metric::L2).unwrap();
    let ip = compute_float_lut(q, &cb, Metric::InnerProduct).unwrap();
    for c in codes.chunks_exact(4).take(300) {
        let rec = cb.decode(c);
        let want = l2_squared(q, &rec);
        assert!((l2.sum(c) - want).abs() <= 1e-4 * want.max(1.0));
        let want_ip = -q.iter().zip(&rec).map(|(a, b)| a * b).sum::<f32>();
        assert!((ip.sum(c) - want_ip).abs() <= 1e-4 * want_ip.abs().max(1.0));
    }
    let qlut = quantize_lut(&l2);
    for c in codes.chunks_exact(4).take(300) {
        let err = (qlut.dequantize(qlut.accumulate(c) as u16) - l2.sum(c)).abs();
        assert!(err <= qlut.scale() * 2.0 + 1e-4);
    }
}

#[test]
fn gaussian_dimensions_have_one_sigma_mass() {
    let set = gaussian(20000, 32, 10);
    let f = compute_dim_stats(&set).unwrap();
    for &x in &f {
        assert!((x - 0.6827).abs() < 0.015, "{x}");
    }
    assert_eq!(select_dims(&f, 0.9).unwrap().pruned_count(), 0);
    assert_eq!(select_dims(&f, 0.5).unwrap().d_kept(), 8);
}

#[test]
fn sparse_dimensions_are_pruned() {
    // Dimension 0: 95% zeros. Dimension 1: Gaussian.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<f32> = (0..5000)
        .flat_map(|i| [if i % 20 == 0 { 5.0 } else { 0.0 }, StandardNormal.sample(&mut rng)])
        .collect();
    let set = VectorSet::new(2, Metric::L2, data).unwrap();
    let f = compute_dim_stats(&set).unwrap();
    assert!(f[0] > 0.94);
    let filter = select_dims(&f, 0.9).unwrap();
    assert_eq!(filter.mask(), &[false, true]);
}

#[test]
fn gbdt_learns_a_threshold_rule_and_not_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let x: Vec<f32> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let rule: Vec<bool> = x.chunks_exact(3).map(|r| r[1] > 0.6).collect();
    let noise: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let (train_x, test_x) = x.split_at(1500 * 3);
    let p = GbdtParams::default();

    let m = train_prob_model(train_x, &rule[..1500], &p, 1).unwrap();
    let scores: Vec<f32> = test_x.chunks_exact(3).map(|r| m.predict(r).unwrap()).collect();
    assert!(auc(&scores, &rule[1500..]) > 0.98);
    // Probability rises with the informative feature.
    let lo = m.predict(&[0.5, 0.1, 0.5]).unwrap();
    let hi = m.predict(&[0.5, 0.9, 0.5]).unwrap();
    assert!(hi > 0.8 && lo < 0.2, "{lo} {hi}");

    let m = train_prob_model(train_x, &noise[..1500], &p, 1).unwrap();
    let scores: Vec<f32> = test_x.chunks_exact(3).map(|r| m.predict(r).unwrap()).collect();
    let a = auc(&scores, &noise[1500..]);
    assert!((a - 0.5).abs() < 0.08, "{a}");
}

#[test]
fn isotropic_cluster_statistics() {
    let set = gaussian(20000, 8, 14);
    let clustering = train_kmeans(set.as_slice(), 8, 1, &KMeansConfig::default()).unwrap();
    let stats = build_cluster_stats(&set, &clustering).unwrap();
    let s = &stats[0];
    let frac = s.outliers.len() as f64 / 20000.0;
    assert!((frac - 0.05).abs() <= 0.02, "{frac}");
    let radius = set
        .rows()
        .map(|r| l2_squared(r, clustering.centroid(0)).sqrt())
        .fold(0f32, f32::max);
    assert!((s.radius - radius).abs() < 1e-4 * radius);
    assert_eq!(s.histogram.iter().sum::<u32>(), 20000);
    // Chi-distributed radii: counts rise to a single peak and then fall.
    let peak = (0..HISTOGRAM_BINS).max_by_key(|&b| s.histogram[b]).unwrap();
    assert!(peak > 0 && peak < HISTOGRAM_BINS - 1);
    assert!(s.histogram[..=peak].windows(2).all(|w| w[0] <= w[1]));
    assert!(s.histogram[peak..].windows(2).all(|w| w[0] >= w[1]));
    let n1: f32 = s.pc1.iter().map(|x| x * x).sum();
    let cross: f32 = s.pc1.iter().zip(&s.pc2).map(|(a, b)| a * b).sum();
    assert!((n1 - 1.0).abs() < 1e-3 && cross.abs() < 1e-3);
}

#[test]
fn stretched_cluster_principal_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data: Vec<f32> = (0..3000)
        .flat_map(|_| {
            let a: f32 = StandardNormal.sample(&mut rng);
            let b: f32 = StandardNormal.sample(&mut rng);
            let c: f32 = StandardNormal.sample(&mut rng);
            [5.0 * a, 2.0 * b, 0.3 * c]
        })
        .collect();
    let set = VectorSet::new(3, Metric::L2, data).unwrap();
    let clustering = train_kmeans(set.as_slice(), 3, 1, &KMeansConfig::default()).unwrap();
    let s = &build_cluster_stats(&set, &clustering).unwrap()[0];
    assert!(s.pc1[0].abs() > 0.99, "{:?}", s.pc1);
    assert!(s.pc2[1].abs() > 0.99, "{:?}", s.pc2);
}

#[test]
fn leaf_graph_structure_and_recall() {
    let dim = 8;
    let set = gaussian(1000, dim, 20);
    let centroid = vec![0f32; dim];
    let g = build_leaf_graph(set.as_slice(), dim, &centroid, 16).unwrap();
    assert_eq!(g.adjacency().len() % 32, 0);
    // Exact neighbor lists on a 500-point prefix against brute force.
    let small = build_leaf_graph(&set.as_slice()[..500 * dim], dim, &centroid, 8).unwrap();
    for i in 0..500u32 {
        let mut all: Vec<Neighbor> = (0..500u32)
            .filter(|&j| j != i)
            .map(|j| Neighbor {
                id: j,
                distance: l2_squared(set.row(i as usize), set.row(j as usize)),
            })
            .collect();
        all.sort_by(Neighbor::cmp_key);
        let got: Vec<u32> = small.neighbors(i).collect();
        let want: Vec<u32> = all[..8].iter().map(|n| n.id).collect();
        assert_eq!(got, want);
        assert!(!got.contains(&i) && !got.contains(&NO_NEIGHBOR));
    }
    let entry = (0..1000)
        .min_by(|&a, &b| l2_squared(set.row(a), &centroid).total_cmp(&l2_squared(set.row(b), &centroid)))
        .unwrap();
    assert_eq!(g.entry() as usize, entry);

    // Beam search over PQ codes against a within-cluster brute-force scan
    // with the same quantized distances.
    let cb = train_codebooks(&set, dim / 2, &KMeansConfig::default()).unwrap();
    let codes = encode_all(&set, &cb).unwrap();
    let ids: Vec<u32> = (0..1000).collect();
    let blocks = pack_blocks(&codes, &ids, dim / 2).unwrap();
    let kernel = Kernel::probe(None);
    let queries = gaussian(100, dim, 21);
    let mut hits = 0;
    for q in queries.rows() {
        let qlut = quantize_lut(&compute_float_lut(q, &cb, Metric::L2).unwrap());
        let mut exact: Vec<Neighbor> = codes
            .chunks_exact(dim / 2)
            .enumerate()
            .map(|(i, c)| Neighbor {
                id: i as u32,
                distance: qlut.dequantize(qlut.accumulate(c) as u16),
            })
            .collect();
        exact.sort_by(Neighbor::cmp_key);
        let out = graph_search(&g, &blocks, &qlut, 32, &kernel);
        assert!(out.candidates.len() <= 32 && out.evaluations <= 1000);
        let found: Vec<u32> = out.candidates.iter().take(10).map(|n| n.id).collect();
        hits += exact[..10].iter().filter(|n| found.contains(&n.id)).count();
    }
    let recall = hits as f64 / 1000.0;
    assert!(recall >= 0.9, "graph recall {recall}");
}

#[test]
fn interpolation_worked_values() {
    let mut p = AdaptiveParams::new(10, 110, 100, 500);
    p.p0 = 0.2;
    p.p1 = 0.1;
    assert_eq!(interpolate_nprob(0.6, &p), 38);
    assert_eq!(interpolate_nprob(0.2, &p), 10);
    assert_eq!(interpolate(1.0, 10, 110, 0.0, 0.0), 110);
    assert_eq!(interpolate(0.5, 100, 500, 0.25, 0.75), 225);
}

proptest! {
    #[test]
    fn interpolation_is_monotone_and_bounded(
        min in 1usize..200,
        span in 0usize..500,
        p0 in 0.0f32..1.0,
        p1 in 0.0f32..1.0,
        a in 0.0f32..=1.0,
        b in 0.0f32..=1.0,
    ) {
        let max = min + span;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let x = interpolate(lo, min, max, p0, p1);
        let y = interpolate(hi, min, max, p0, p1);
        prop_assert!(x <= y);
        prop_assert!((min..=max).contains(&x) && (min..=max).contains(&y));
    }

    #[test]
    fn packing_round_trip(n in 1usize..80, half_m in 1usize..10, seed in any::<u64>()) {
        let m = 2 * half_m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<u8> = (0..n * m).map(|_| rng.random_range(0..16)).collect();
        let ids: Vec<u32> = (0..n as u32).collect();
        let blocks = pack_blocks(&codes, &ids, m).unwrap();
        let mut back = Vec::new();
        for b in &blocks {
            back.extend_from_slice(&b.unpack()[..b.valid_count() * m]);
        }
        prop_assert_eq!(back, codes);
    }
}
