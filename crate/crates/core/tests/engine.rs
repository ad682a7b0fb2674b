use leafann::adaptive::{AdaptiveParams, TrainParams};
use leafann::dataset::{brute_force_topk, recall_at_k, Metric, VectorSet};
use leafann::error::Error;
use leafann::kernels::{available_backends, Kernel, LanesPerPass};
use leafann::leafgraph::HybridPolicy;
use leafann::pq::ResidualMode;
use leafann::synth::{gaussian_mixture, split_queries};
use leafann::{build_index, load_index, save_index, Index, IndexParams, SearchRequest};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn dataset(metric: Metric, seed: u64) -> (VectorSet, VectorSet) {
    let all = gaussian_mixture(2600, 16, 8, 0.6, seed).with_metric(metric);
    split_queries(&all, 100)
}

fn index_for(base: &VectorSet, clusters: usize, f: impl FnOnce(&mut IndexParams)) -> Index {
    let mut params = IndexParams {
        num_clusters: Some(clusters),
        ..IndexParams::new(base.metric())
    };
    f(&mut params);
    build_index(base, &params).unwrap()
}

fn ids(index: &Index, queries: &VectorSet, req: &SearchRequest) -> Vec<Vec<u32>> {
    index
        .search_batch(queries, req)
        .unwrap()
        .iter()
        .map(|r| r.ids())
        .collect()
}

#[test]
fn exhaustive_search_is_brute_force_for_every_metric() {
    for metric in [Metric::L2, Metric::Angular, Metric::InnerProduct] {
        for mode in [ResidualMode::RawMean, ResidualMode::Normalized, ResidualMode::None] {
            let (base, queries) = dataset(metric, 3);
            let index = index_for(&base, 20, |p| p.residual_mode = mode);
            let truth = brute_force_topk(&base, &queries, 10).unwrap();
            let got = index
                .search_batch(&queries, &SearchRequest::exhaustive(&index, 10))
                .unwrap();
            for (q, r) in got.iter().enumerate() {
                assert_eq!(r.neighbors, truth.neighbors[q], "{metric:?} {mode:?} query {q}");
            }
        }
    }
}

#[test]
fn recall_grows_with_nprob() {
    let (base, queries) = dataset(Metric::L2, 7);
    let index = index_for(&base, 40, |_| {});
    let truth = brute_force_topk(&base, &queries, 10).unwrap();
    let mut last = 0.0;
    for nprob in [1, 2, 4, 8, 16, 40] {
        let r = recall_at_k(&ids(&index, &queries, &SearchRequest::new(10, nprob, 400)), &truth, 10);
        assert!(r + 1e-9 >= last, "nprob {nprob}: {r} < {last}");
        last = r;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn kernel_choice_does_not_change_results() {
    let (base, queries) = dataset(Metric::L2, 9);
    let index = index_for(&base, 20, |_| {});
    let mut req = SearchRequest::new(10, 5, 50);
    req.kernel = Some(Kernel::Scalar);
    let scalar = index.search_batch(&queries, &req).unwrap();
    for backend in available_backends() {
        for lanes in [LanesPerPass::Two, LanesPerPass::Four] {
            req.kernel = Some(Kernel::Vector { lanes, backend });
            assert_eq!(index.search_batch(&queries, &req).unwrap(), scalar);
        }
    }
}

#[test]
fn diagnostics_add_up() {
    let (base, queries) = dataset(Metric::L2, 11);
    let index = index_for(&base, 25, |_| {});
    let req = SearchRequest::new(10, 6, 60);
    for q in queries.rows() {
        let r = index.search(q, &req).unwrap();
        let d = &r.diagnostics;
        assert_eq!(d.clusters_probed + d.clusters_pruned, 6);
        assert_eq!((d.nprob_used, d.reorder_used), (6, 60));
        let ranked = leafann::kmeans::rank_clusters(q, index.clustering(), 6, Metric::L2).unwrap();
        let sizes: usize = ranked.iter().map(|c| index.members(c.id as usize).len()).sum();
        assert_eq!(d.points_scanned, sizes);
        assert_eq!(r.neighbors.len(), 10);
        assert!(r.neighbors.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}

#[test]
fn batch_equals_sequential() {
    let (base, queries) = dataset(Metric::InnerProduct, 13);
    let index = index_for(&base, 20, |_| {});
    let req = SearchRequest::new(7, 4, 30);
    let batch = index.search_batch(&queries, &req).unwrap();
    for (q, r) in queries.rows().zip(&batch) {
        assert_eq!(&index.search(q, &req).unwrap(), r);
    }
}

fn trained(base: &VectorSet, seed: u64) -> Index {
    let mut index = index_for(base, 30, |p| p.graph_degree = Some(12));
    let learn = gaussian_mixture(600, 16, 8, 0.6, seed);
    let truth = brute_force_topk(base, &learn, 10).unwrap();
    index
        .train(
            &learn,
            &truth,
            &TrainParams::new(10, AdaptiveParams::new(2, 12, 20, 80)),
        )
        .unwrap();
    index
}

#[test]
fn disabled_features_match_the_plain_path() {
    let (base, queries) = dataset(Metric::L2, 17);
    let index = trained(&base, 18);
    let plain = SearchRequest::new(10, 8, 50);
    let baseline = index.search_batch(&queries, &plain).unwrap();

    let mut bf = plain.clone();
    bf.hybrid = Some(HybridPolicy::brute_force_only());
    assert_eq!(index.search_batch(&queries, &bf).unwrap(), baseline);

    let mut theta0 = plain.clone();
    theta0.prune_theta = Some(0.0);
    assert_eq!(index.search_batch(&queries, &theta0).unwrap(), baseline);

    // Adaptive with a degenerate range pins nprob and reorder.
    let mut pinned = plain.clone();
    pinned.adaptive = true;
    pinned.adaptive_params = Some(AdaptiveParams::new(8, 8, 50, 50));
    assert_eq!(ids(&index, &queries, &pinned), ids(&index, &queries, &plain));
    for r in index.search_batch(&queries, &pinned).unwrap() {
        assert_eq!((r.diagnostics.nprob_used, r.diagnostics.reorder_used), (8, 50));
    }

    // The hybrid policy takes the graph path beyond the first clusters.
    let mut hybrid = plain.clone();
    hybrid.hybrid = Some(HybridPolicy::default());
    let graphed = index.search_batch(&queries, &hybrid).unwrap();
    assert!(graphed.iter().any(|r| r.diagnostics.graph_clusters > 0));
    let truth = brute_force_topk(&base, &queries, 10).unwrap();
    let rh = recall_at_k(&graphed.iter().map(|r| r.ids()).collect::<Vec<_>>(), &truth, 10);
    let rb = recall_at_k(&baseline.iter().map(|r| r.ids()).collect::<Vec<_>>(), &truth, 10);
    assert!(rh > rb - 0.05, "hybrid {rh} brute {rb}");
}

#[test]
fn adaptive_search_needs_models() {
    let (base, queries) = dataset(Metric::L2, 19);
    let index = index_for(&base, 20, |_| {});
    let mut req = SearchRequest::new(10, 4, 40);
    req.adaptive = true;
    assert!(matches!(
        index.search(queries.row(0), &req),
        Err(Error::MissingComponent(_))
    ));
    req.adaptive = false;
    req.hybrid = Some(HybridPolicy::default());
    assert!(index.search(queries.row(0), &req).is_err());
    assert!(index.search(&[0.0; 3], &SearchRequest::new(10, 4, 40)).is_err());
}

#[test]
fn persistence_round_trip_and_damage() {
    let (base, queries) = dataset(Metric::L2, 23);
    let index = trained(&base, 24);
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("index.bin");
    save_index(&index, &path).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded, index);
    let mut req = SearchRequest::new(10, 6, 40);
    req.adaptive = true;
    req.prune_theta = Some(0.2);
    req.hybrid = Some(HybridPolicy::default());
    assert_eq!(
        loaded.search_batch(&queries, &req).unwrap(),
        index.search_batch(&queries, &req).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    let short = dir.path().join("short.bin");
    std::fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_index(&short).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let mut flipped = bytes.clone();
        let at = rng.random_range(0..flipped.len());
        flipped[at] ^= 1 << rng.random_range(0..8);
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &flipped).unwrap();
        assert!(load_index(&bad).is_err(), "flip at {at} went unnoticed");
    }
    assert!(load_index(dir.path().join("missing.bin")).is_err());
}

#[test]
fn filtration_keeps_exhaustive_search_exact() {
    // Half of the coordinates are constant and filtered away.
    let (base, queries) = dataset(Metric::L2, 29);
    let pad = |set: &VectorSet| {
        let rows: Vec<Vec<f32>> = set
            .rows()
            .map(|r| r.iter().copied().chain([0.0; 16]).collect())
            .collect();
        VectorSet::from_rows(&rows, Metric::L2).unwrap()
    };
    let (base, queries) = (pad(&base), pad(&queries));
    let index = index_for(&base, 20, |p| p.filter_threshold = Some(0.9));
    assert!(index.working_dim() <= 16, "{}", index.working_dim());
    assert!(index.filter().is_some());
    let truth = brute_force_topk(&base, &queries, 10).unwrap();
    let got = index
        .search_batch(&queries, &SearchRequest::exhaustive(&index, 10))
        .unwrap();
    for (q, r) in got.iter().enumerate() {
        assert_eq!(r.neighbors, truth.neighbors[q]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exhaustive_small_sets(seed in any::<u64>(), n in 40usize..200, dim in 2usize..12, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..(n + 5) * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = VectorSet::new(dim, Metric::L2, data).unwrap();
        let (base, queries) = split_queries(&all, 5);
        let index = index_for(&base, 4, |p| p.seed = seed);
        let truth = brute_force_topk(&base, &queries, k).unwrap();
        for (q, row) in queries.rows().enumerate() {
            let r = index.search(row, &SearchRequest::exhaustive(&index, k)).unwrap();
            prop_assert_eq!(&r.neighbors, &truth.neighbors[q]);
        }
    }
}
