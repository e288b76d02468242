use std::collections::BTreeSet;

use gito::graph::{
    build_knn_graph, build_radius_graph, compute_features, graph_stats, PointCloud, Topology,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, seed: u64, with_values: bool) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    if with_values {
        let vals = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PointCloud::with_values(2, coords, 1, vals).unwrap()
    } else {
        PointCloud::new(2, coords).unwrap()
    }
}

/// Exhaustive scan: for every receiver, sort all others by (distance, index).
fn knn_oracle(cloud: &PointCloud, k: usize) -> BTreeSet<(usize, usize)> {
    let n = cloud.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut all: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let (a, b) = (cloud.point(i), cloud.point(j));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2), j)
            })
            .collect();
        all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        for &(_, j) in &all[..k] {
            edges.insert((j, i));
        }
    }
    edges
}

fn radius_oracle(cloud: &PointCloud, r: f64) -> BTreeSet<(usize, usize)> {
    let n = cloud.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (cloud.point(i), cloud.point(j));
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if d > 0.0 && d <= r {
                edges.insert((j, i));
            }
        }
    }
    edges
}

fn edge_set(t: &Topology) -> BTreeSet<(usize, usize)> {
    t.edges().collect()
}

#[test]
fn knn_matches_exhaustive_oracle() {
    for seed in 0..10 {
        let c = random_cloud(60, seed, false);
        for k in [1, 4, 8] {
            assert_eq!(edge_set(&build_knn_graph(&c, k).unwrap()), knn_oracle(&c, k));
        }
    }
}

#[test]
fn grid_accelerated_paths_match_oracle() {
    let c = random_cloud(2_500, 11, false);
    let knn = build_knn_graph(&c, 6).unwrap();
    assert_eq!(knn.n_edges(), 2_500 * 6);
    assert_eq!(edge_set(&knn), knn_oracle(&c, 6));
    let rad = build_radius_graph(&c, 0.03).unwrap();
    assert_eq!(edge_set(&rad), radius_oracle(&c, 0.03));
}

#[test]
fn grid_accelerator_keeps_index_tie_break_on_lattice() {
    // Lattice points have many exact distance ties.
    let coords: Vec<f64> = (0..2_116).flat_map(|i| [(i % 46) as f64, (i / 46) as f64]).collect();
    let c = PointCloud::new(2, coords).unwrap();
    assert_eq!(edge_set(&build_knn_graph(&c, 5).unwrap()), knn_oracle(&c, 5));
}

#[test]
fn knn_doubling_k_doubles_edges() {
    let c = random_cloud(300, 5, false);
    let e4 = build_knn_graph(&c, 4).unwrap().n_edges();
    let e8 = build_knn_graph(&c, 8).unwrap().n_edges();
    assert_eq!(e8, 2 * e4);
}

#[test]
fn radius_graph_matches_oracle_and_is_monotone() {
    for seed in 0..5 {
        let c = random_cloud(80, 100 + seed, false);
        let mut prev = 0;
        for r in [0.05, 0.1, 0.25, 0.5, 0.9] {
            let t = build_radius_graph(&c, r).unwrap();
            assert_eq!(edge_set(&t), radius_oracle(&c, r));
            assert!(t.n_edges() >= prev);
            prev = t.n_edges();
        }
    }
}

#[test]
fn isolated_nodes_are_reported() {
    let c = PointCloud::new(2, vec![0.0, 0.0, 0.1, 0.0, 5.0, 5.0]).unwrap();
    let s = graph_stats(&build_radius_graph(&c, 0.2).unwrap());
    assert_eq!((s.nodes, s.edges, s.isolated), (3, 2, 1));
    assert!(s.to_kv().contains("isolated=1\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_edge_count_is_n_times_k(n in 2usize..120, k_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let c = random_cloud(n, seed, false);
        let t = build_knn_graph(&c, k).unwrap();
        prop_assert_eq!(t.n_edges(), n * k);
        prop_assert!(t.in_degrees().iter().all(|&d| d == k));
        prop_assert!(t.edges().all(|(s, r)| s != r));
    }

    #[test]
    fn radius_graph_is_symmetric(n in 1usize..100, r in 0.01f64..0.6, seed in 0u64..1000) {
        let c = random_cloud(n, seed, false);
        let e = edge_set(&build_radius_graph(&c, r).unwrap());
        for &(s, t) in &e {
            prop_assert!(e.contains(&(t, s)));
        }
    }

    #[test]
    fn edge_features_antisymmetric_and_translation_invariant(
        n in 2usize..60,
        seed in 0u64..1000,
        dx in -10.0f64..10.0,
        dy in -10.0f64..10.0,
    ) {
        let c = random_cloud(n, seed, true);
        let t = build_radius_graph(&c, 0.4).unwrap();
        let (nodes, edges) = compute_features(&t, &c).unwrap();
        let w = 4;
        let pairs: Vec<(usize, usize)> = t.edges().collect();
        for (e, &(s, r)) in pairs.iter().enumerate() {
            let back = pairs.iter().position(|&p| p == (r, s)).unwrap();
            let (a, b) = (&edges[e * w..(e + 1) * w], &edges[back * w..(back + 1) * w]);
            prop_assert_eq!(a[0], -b[0]);
            prop_assert_eq!(a[1], -b[1]);
            prop_assert_eq!(a[2], b[2]);
            prop_assert_eq!(a[3], -b[3]);
        }
        let moved = c.translated(&[dx, dy]);
        // Same topology: rounding could flip pairs sitting exactly on the radius.
        let (nodes2, edges2) = compute_features(&t, &moved).unwrap();
        for (a, b) in edges.iter().zip(&edges2) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for i in 0..n {
            prop_assert!((nodes2[i * 3] - nodes[i * 3] - dx).abs() <= 1e-12);
            prop_assert!((nodes2[i * 3 + 1] - nodes[i * 3 + 1] - dy).abs() <= 1e-12);
            prop_assert_eq!(nodes2[i * 3 + 2], nodes[i * 3 + 2]);
        }
    }
}
