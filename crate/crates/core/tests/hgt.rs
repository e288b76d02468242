use gito::attention::{AttentionConfig, FeedForward};
use gito::autodiff::{ParamSet, Var};
use gito::graph::{build_knn_graph, PointCloud, Topology};
use gito::hgt::{GatV2, Hgt, HgtBlock, HgtConfig};
use gito::nn::{Builder, Forward};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(w: usize, heads: usize, fusion: bool) -> HgtConfig {
    HgtConfig {
        attention: AttentionConfig::new(w, heads).unwrap(),
        mlp_hidden: 12,
        mlp_layers: 2,
        ff: FeedForward {
            mult: 2,
            experts: Some(2),
            coord_dim: 2,
        },
        fusion,
    }
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Graph {
    topo: Topology,
    coords: Vec<f64>,
    nodes: Vec<f64>,
    edges: Vec<f64>,
}

fn random_graph(n: usize, k: usize, w: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random(2 * n, &mut rng);
    let topo = build_knn_graph(&PointCloud::new(2, coords.clone()).unwrap(), k).unwrap();
    let nodes = random(n * w, &mut rng);
    let edges = random(topo.n_edges() * w, &mut rng);
    Graph {
        topo,
        coords,
        nodes,
        edges,
    }
}

/// Applies `perm` (old row i -> new row perm[i]) to a row-major matrix.
fn permute_rows(data: &[f64], perm: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p * width..(p + 1) * width].copy_from_slice(&data[i * width..(i + 1) * width]);
    }
    out
}

fn run_gat(gat: &GatV2, params: &ParamSet<f64>, g: &Graph, w: usize) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut f = Forward::new(params);
    let nv = f.matrix(g.topo.n_nodes(), w, &g.nodes).unwrap();
    let ev = if g.topo.n_edges() > 0 {
        Some(f.matrix(g.topo.n_edges(), w, &g.edges).unwrap())
    } else {
        None
    };
    let out = gat.forward(&mut f, nv, ev, &g.topo).unwrap();
    let alpha = out.alpha.map(|a| f.tape.value(a).to_vec());
    (f.tape.value(out.nodes).to_vec(), alpha)
}

#[test]
fn attention_weights_sum_to_one_per_receiver() {
    let (w, heads) = (8, 2);
    let mut b = Builder::<f64>::new(1);
    let gat = GatV2::new(&mut b, "g", &cfg(w, heads, true));
    let params = b.finish();
    for seed in 0..5 {
        let g = random_graph(20, 3 + seed as usize, w, seed);
        let (_, alpha) = run_gat(&gat, &params, &g, w);
        let alpha = alpha.unwrap();
        let mut sums = vec![vec![0.0; heads]; 20];
        for (e, r) in g.topo.receivers().iter().enumerate() {
            for h in 0..heads {
                sums[*r][h] += alpha[e * heads + h];
            }
        }
        for s in sums.iter().flatten() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_incoming_edge_gets_full_weight() {
    let w = 4;
    let mut b = Builder::<f64>::new(2);
    let gat = GatV2::new(&mut b, "g", &cfg(w, 2, true));
    let params = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph {
        topo: build_knn_graph(&PointCloud::new(2, vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap(), 1).unwrap(),
        coords: vec![],
        nodes: random(3 * w, &mut rng),
        edges: random(3 * w, &mut rng),
    };
    let (_, alpha) = run_gat(&gat, &params, &g, w);
    assert!(alpha.unwrap().iter().all(|&a| a == 1.0));
}

#[test]
fn isolated_nodes_keep_only_the_self_transform() {
    let w = 8;
    let mut b = Builder::<f64>::new(4);
    let gat = GatV2::new(&mut b, "g", &cfg(w, 4, true));
    let params = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Node 4 has no edges at all.
    let topo = Topology::new(5, vec![1, 2, 3, 0], vec![0, 1, 2, 3]).unwrap();
    let g = Graph {
        nodes: random(5 * w, &mut rng),
        edges: random(topo.n_edges() * w, &mut rng),
        topo,
        coords: vec![],
    };
    let bare = Graph {
        topo: Topology::empty(5),
        nodes: g.nodes.clone(),
        edges: vec![],
        coords: vec![],
    };
    let (with_edges, _) = run_gat(&gat, &params, &g, w);
    let (self_only, alpha) = run_gat(&gat, &params, &bare, w);
    assert!(alpha.is_none());
    assert_eq!(&with_edges[4 * w..], &self_only[4 * w..]);
    assert_ne!(&with_edges[..w], &self_only[..w]);
}

#[test]
fn gnn_layer_is_permutation_equivariant() {
    let w = 8;
    let mut b = Builder::<f64>::new(6);
    let gat = GatV2::new(&mut b, "g", &cfg(w, 2, true));
    let params = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..5 {
        let g = random_graph(16, 4, w, seed);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let pg = Graph {
            topo: g.topo.permuted(&perm),
            nodes: permute_rows(&g.nodes, &perm, w),
            edges: g.edges.clone(),
            coords: vec![],
        };
        let (a, _) = run_gat(&gat, &params, &g, w);
        let (b, _) = run_gat(&gat, &params, &pg, w);
        assert!(max_abs_diff(&permute_rows(&a, &perm, w), &b) < 1e-12);
    }
}

fn run_block(block: &HgtBlock, params: &ParamSet<f64>, g: &Graph, w: usize) -> Vec<f64> {
    let mut f = Forward::new(params);
    let n = g.topo.n_nodes();
    let nv = f.matrix(n, w, &g.nodes).unwrap();
    let ev: Option<Var> = (g.topo.n_edges() > 0).then(|| f.matrix(g.topo.n_edges(), w, &g.edges).unwrap());
    let cv = f.matrix(n, 2, &g.coords).unwrap();
    let (y, _) = block.forward(&mut f, nv, ev, &g.topo, cv).unwrap();
    assert_eq!(f.tape.shape(y), &[n, block.out_width()]);
    f.tape.value(y).to_vec()
}

#[test]
fn hgt_block_is_permutation_equivariant() {
    let w = 8;
    for fusion in [true, false] {
        let mut b = Builder::<f64>::new(8);
        let block = HgtBlock::new(&mut b, "h", &cfg(w, 2, fusion), true);
        let params = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..3 {
            let g = random_graph(16, 4, w, seed);
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut rng);
            let pg = Graph {
                topo: g.topo.permuted(&perm),
                coords: permute_rows(&g.coords, &perm, 2),
                nodes: permute_rows(&g.nodes, &perm, w),
                edges: g.edges.clone(),
            };
            let a = run_block(&block, &params, &g, w);
            let b = run_block(&block, &params, &pg, w);
            assert!(max_abs_diff(&permute_rows(&a, &perm, w), &b) < 1e-10, "fusion={fusion}");
        }
    }
}

#[test]
fn single_node_without_edges_is_finite() {
    let w = 8;
    let mut b = Builder::<f64>::new(10);
    let block = HgtBlock::new(&mut b, "h", &cfg(w, 4, true), true);
    let params = b.finish();
    let g = Graph {
        topo: Topology::empty(1),
        coords: vec![0.3, 0.7],
        nodes: (0..w).map(|i| i as f64 / 7.0 - 0.5).collect(),
        edges: vec![],
    };
    let y = run_block(&block, &params, &g, w);
    assert_eq!(y.len(), w);
    assert!(y.iter().all(|x| x.is_finite()));
}

#[test]
fn fused_width_is_twice_hidden() {
    let mut b = Builder::<f32>::new(11);
    let c = cfg(96, 8, true);
    let last = HgtBlock::new(&mut b, "a", &c, false);
    let inner = HgtBlock::new(&mut b, "b", &c, true);
    assert_eq!(last.out_width(), 192);
    assert_eq!(inner.out_width(), 96);
    let unfused = HgtBlock::new(&mut b, "c", &cfg(96, 8, false), false);
    assert_eq!(unfused.out_width(), 96);
    let stack = Hgt::new(&mut b, "s", &c, 3);
    assert_eq!(stack.out_width(96), 192);
    assert_eq!(stack.blocks.len(), 3);
}

#[test]
fn stacked_blocks_carry_edge_states() {
    let w = 8;
    let mut b = Builder::<f64>::new(12);
    let stack = Hgt::new(&mut b, "s", &cfg(w, 2, true), 2);
    let params = b.finish();
    let g = random_graph(10, 3, w, 13);
    let mut f = Forward::new(&params);
    let nv = f.matrix(10, w, &g.nodes).unwrap();
    let ev = f.matrix(g.topo.n_edges(), w, &g.edges).unwrap();
    let cv = f.matrix(10, 2, &g.coords).unwrap();
    let y = stack.forward(&mut f, nv, Some(ev), &g.topo, cv).unwrap();
    assert_eq!(f.tape.shape(y), &[10, 2 * w]);
    assert!(f.tape.value(y).iter().all(|x| x.is_finite()));
}
