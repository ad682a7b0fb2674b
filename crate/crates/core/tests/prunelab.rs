use leafann::dataset::{brute_force_topk, l2_squared, Metric, Neighbor, VectorSet};
use leafann::kernels::CandidatePool;
use leafann::prunelab::{
    annulus_filter, hull_scan, hull_vertices, measure_prune_stats, reports_csv, sign_sweep, strips_scan, AnnulusData,
    HullIndex, Lab, LabStrategy, SignFilter, SignIndex, StripsIndex,
};
use leafann::synth::{gaussian_mixture, split_queries};
use leafann::{build_index, IndexParams, SearchRequest};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_index(metric: Metric) -> (leafann::Index, VectorSet, VectorSet) {
    let all = gaussian_mixture(3200, 12, 10, 0.5, 31).with_metric(metric);
    let (base, queries) = split_queries(&all, 200);
    let params = IndexParams {
        num_clusters: Some(24),
        ..IndexParams::new(metric)
    };
    (build_index(&base, &params).unwrap(), base, queries)
}

#[test]
fn annulus_never_prunes_a_point_within_the_bound() {
    let (index, base, _) = small_index(Metric::L2);
    let data = AnnulusData::for_index(&index).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pruned_total = 0;
    for _ in 0..2000 {
        let q: Vec<f32> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = rng.random_range(0..index.num_clusters());
        let ub = rng.random_range(0.0f64..6.0);
        let keep = annulus_filter(data.query_distance(c, &q), ub, data.radii(c)).unwrap();
        for (&id, &k) in index.members(c).iter().zip(&keep) {
            let d = (l2_squared(&q, base.row(id as usize)) as f64).sqrt();
            if !k {
                pruned_total += 1;
                assert!(d > ub, "pruned point at distance {d} <= {ub}");
            }
        }
    }
    assert!(pruned_total > 0);
    for c in 0..index.num_clusters() {
        for (&id, &r) in index.members(c).iter().zip(data.radii(c)) {
            let want = (l2_squared(base.row(id as usize), index.clustering().centroid(c)) as f64).sqrt();
            assert!(r >= 0.0 && (r - want).abs() < 1e-4);
        }
    }
}

#[test]
fn full_hamming_threshold_is_exact() {
    let (index, _, queries) = small_index(Metric::L2);
    let sign = SignIndex::for_index(&index, 8, 3).unwrap();
    let req = SearchRequest::new(10, 6, 40);
    for q in queries.rows().take(50) {
        let plain = index.search(q, &req).unwrap();
        let filtered = index
            .search_with_filter(
                q,
                &req,
                Some(&SignFilter {
                    index: &sign,
                    threshold: 8,
                }),
            )
            .unwrap();
        assert_eq!(plain.neighbors, filtered.neighbors);
    }
    let exhaustive = SearchRequest::exhaustive(&index, 10);
    for q in queries.rows().take(20) {
        let own = index
            .search_with_filter(
                q,
                &exhaustive,
                Some(&SignFilter {
                    index: &sign,
                    threshold: 0,
                }),
            )
            .unwrap();
        assert!(own.diagnostics.points_filtered > 0);
    }
}

#[test]
fn sign_bits_match_hyperplane_sides() {
    let (index, base, _) = small_index(Metric::L2);
    let sign = SignIndex::for_index(&index, 6, 9).unwrap();
    for c in [0, 5, 11] {
        let normals = sign.normals(c);
        let centroid = index.clustering().centroid(c);
        for (&id, &s) in index.members(c).iter().zip(sign.signatures(c)) {
            for b in 0..6 {
                let n = &normals[b * 12..(b + 1) * 12];
                let side: f32 = base
                    .row(id as usize)
                    .iter()
                    .zip(centroid)
                    .zip(n)
                    .map(|((x, m), w)| (x - m) * w)
                    .sum();
                assert_eq!((s >> b) & 1 == 1, side >= 0.0);
            }
        }
    }
}

#[test]
fn strips_with_room_in_the_pool_are_brute_force() {
    let (index, base, queries) = small_index(Metric::L2);
    let strips = StripsIndex::for_index(&index, 16, 0).unwrap();
    for q in queries.rows().take(30) {
        let c = 3;
        let members = index.members(c);
        let mut pool = CandidatePool::new(members.len() + 1);
        let scan = strips_scan(q, c, &strips, &base, &mut pool);
        assert_eq!(scan.visited.len(), 16);
        assert_eq!(scan.evaluated, members.len());
        let mut want: Vec<Neighbor> = members
            .iter()
            .map(|&id| Neighbor {
                id,
                distance: l2_squared(q, base.row(id as usize)),
            })
            .collect();
        want.sort_by(Neighbor::cmp_key);
        assert_eq!(pool.into_sorted(), want);
    }
}

#[test]
fn strips_scan_is_exact_within_probed_clusters() {
    let (index, base, queries) = small_index(Metric::L2);
    let lab = Lab {
        strips: Some(StripsIndex::for_index(&index, 16, 1).unwrap()),
        ..Default::default()
    };
    let truth = brute_force_topk(&base, &queries, 10).unwrap();
    let req = SearchRequest::new(10, index.num_clusters(), 10);
    let r = measure_prune_stats(&index, &lab, LabStrategy::Strips, &queries, &truth, &req).unwrap();
    assert_eq!(r.recall, 1.0);
    assert!(r.pruned_fraction > 0.0 && r.pruned_fraction < 1.0);
}

/// Point-in-hull oracle by brute-force facet enumeration: a point is inside
/// iff it is on the inner side of every supporting plane through three vertices.
fn inside_all_supporting_planes(p: [f64; 3], verts: &[[f64; 3]], slack: f64) -> bool {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for i in 0..verts.len() {
        for j in i + 1..verts.len() {
            for k in j + 1..verts.len() {
                let (u, v) = (sub(verts[j], verts[i]), sub(verts[k], verts[i]));
                let n = [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ];
                let len = dot(n, n).sqrt();
                if len < 1e-9 {
                    continue;
                }
                let n = [n[0] / len, n[1] / len, n[2] / len];
                let h: Vec<f64> = verts.iter().map(|&w| dot(n, sub(w, verts[i]))).collect();
                let (lo, hi) = h.iter().fold((0f64, 0f64), |(a, b), &x| (a.min(x), b.max(x)));
                let hp = dot(n, sub(p, verts[i]));
                if lo >= -1e-9 && hp < -slack {
                    return false;
                }
                if hi <= 1e-9 && hp > slack {
                    return false;
                }
            }
        }
    }
    true
}

#[test]
fn hull_non_vertices_are_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let n = 40 + trial * 10;
        let pts: Vec<f64> = (0..n * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let flags = hull_vertices(&pts, 3).unwrap();
        let rows: Vec<[f64; 3]> = pts.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let verts: Vec<[f64; 3]> = rows.iter().zip(&flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect();
        assert!(verts.len() >= 4);
        for (p, &f) in rows.iter().zip(&flags) {
            if !f {
                assert!(inside_all_supporting_planes(*p, &verts, 1e-6));
            }
        }
        // Every flagged point is extreme: it lies outside the hull of the others.
        for (i, p) in rows.iter().enumerate().filter(|(i, _)| flags[*i]) {
            let others: Vec<[f64; 3]> = rows
                .iter()
                .zip(&flags)
                .enumerate()
                .filter(|(j, (_, &f))| f && *j != i)
                .map(|(_, (q, _))| *q)
                .collect();
            assert!(
                !inside_all_supporting_planes(*p, &others, 1e-9),
                "vertex {i} is interior"
            );
        }
    }
}

#[test]
fn hull_scan_prunes_only_when_vertices_miss_the_pool() {
    let all = gaussian_mixture(1200, 6, 4, 0.5, 3).with_metric(Metric::InnerProduct);
    let params = IndexParams {
        num_clusters: Some(8),
        ..IndexParams::new(Metric::InnerProduct)
    };
    let index = build_index(&all, &params).unwrap();
    let hull = HullIndex::for_index(&index, 3, 0).unwrap();
    let frac = hull.non_vertex_fraction();
    assert!(frac > 0.5 && frac < 1.0, "{frac}");
    let q = all.row(0);
    let mut pool = CandidatePool::new(5);
    let first = hull_scan(q, 0, &hull, &all, &mut pool).unwrap();
    assert_eq!(first.pruned, 0);
    assert_eq!(first.evaluated, index.members(0).len());
    // A pool already holding unbeatable scores prunes every interior point.
    let mut tight = CandidatePool::new(1);
    tight.push(Neighbor {
        id: u32::MAX,
        distance: f32::NEG_INFINITY,
    });
    let second = hull_scan(q, 1, &hull, &all, &mut tight).unwrap();
    assert_eq!(second.evaluated + second.pruned, index.members(1).len());
    assert_eq!(second.evaluated, hull.cluster(1).vertex_count());

    let l2 = small_index(Metric::L2).0;
    assert!(HullIndex::for_index(&l2, 3, 0).is_err());
}

#[test]
fn measurement_baselines() {
    let (index, base, queries) = small_index(Metric::L2);
    let truth = brute_force_topk(&base, &queries, 10).unwrap();
    let lab = Lab {
        sign: Some(SignIndex::for_index(&index, 12, 2).unwrap()),
        annulus: Some(AnnulusData::for_index(&index).unwrap()),
        ..Default::default()
    };
    let req = SearchRequest::new(10, 4, 30);
    let rows = sign_sweep(&index, &lab, &queries, &truth, &req, &[4, 8, 12]).unwrap();
    assert_eq!(rows[0].pruned_fraction, 0.0);
    let plain = leafann::bench::evaluate(&index, &queries, &truth, &req).unwrap();
    assert_eq!(rows[0].recall, plain.recall);
    assert_eq!(rows[3].recall, plain.recall);
    assert!(rows[1].pruned_fraction >= rows[2].pruned_fraction);
    assert_eq!(reports_csv(&rows).lines().count(), 5);

    let ann = measure_prune_stats(&index, &lab, LabStrategy::Annulus, &queries, &truth, &req).unwrap();
    assert!(ann.recall >= plain.recall);
    assert!(ann.pruned_fraction > 0.0);
    assert!(measure_prune_stats(&index, &lab, LabStrategy::Hull, &queries, &truth, &req).is_err());
}

proptest! {
    #[test]
    fn annulus_inequality(d_qc in 0.0f64..100.0, ub in 0.0f64..50.0, r in 0.0f64..150.0) {
        let keep = annulus_filter(d_qc, ub, &[r]).unwrap()[0];
        prop_assert_eq!(keep, (d_qc - ub..=d_qc + ub).contains(&r));
    }

    #[test]
    fn square_like_hulls(seed in any::<u64>(), n in 5usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = vec![-1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0];
        for _ in 4..n {
            pts.push(rng.random_range(-0.99..0.99));
            pts.push(rng.random_range(-0.99..0.99));
        }
        let f = hull_vertices(&pts, 2).unwrap();
        prop_assert!(f[..4].iter().all(|&v| v));
        prop_assert!(f[4..].iter().all(|&v| !v));
    }
}
