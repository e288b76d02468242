//! Finite-difference gradient checks for each layer type and the full model.
//!
//! Every check runs in f64 at a reduced width that keeps the structural
//! choices of a [`ModelConfig`] (heads, experts, fusion, feed-forward
//! multipliers) and compares tape gradients against central differences on
//! a random subset of coordinates of every parameter tensor.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, AttentionConfig, ExpertBank, FeedForward};
use crate::autodiff::{relative_error, ParamSet, Var};
use crate::data::Sample;
use crate::error::{GitoError, Result};
use crate::graph::{build_knn_graph, GraphStrategy, PointCloud, Topology};
use crate::hgt::{GatV2, HgtBlock, HgtConfig};
use crate::model::{Gito, ModelConfig};
use crate::nn::{Builder, Forward, Mlp};
use crate::train::relative_l2_loss;

/// Pass threshold on the relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-6;
/// Coordinates probed per parameter tensor.
const PER_TENSOR: usize = 6;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub seed: u64,
    pub rel_error: f64,
    /// Number of parameter coordinates compared.
    pub probed: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < GRAD_TOL
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={} seed={} rel_error={:.3e} probed={} status={}",
            self.name,
            self.seed,
            self.rel_error,
            self.probed,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// Names of the checks run by [`layer_checks`], in order.
pub const CHECKS: [&str; 9] = [
    "encoder",
    "gatv2",
    "global_attention",
    "fusion",
    "no_fusion",
    "cross_attention",
    "moe",
    "decoder",
    "model",
];

/// Runs every layer check and the end-to-end check for one seed.
pub fn layer_checks(cfg: &ModelConfig, seed: u64) -> Result<Vec<GradCheck>> {
    CHECKS.iter().map(|name| run_check(name, cfg, seed)).collect()
}

/// Runs a single named check.
pub fn run_check(name: &str, cfg: &ModelConfig, seed: u64) -> Result<GradCheck> {
    let toy = Toy::new(cfg, seed);
    let (name, params, loss): (&'static str, ParamSet<f64>, Box<LossFn<'static>>) = match name {
        "encoder" => {
            let mut b = Builder::new(seed);
            let mlp = Mlp::new(&mut b, "enc", toy.d + 1, toy.mlp, toy.w, toy.layers);
            let x = toy.matrix(6, toy.d + 1, 1);
            let w = toy.matrix(6, toy.w, 2);
            ("encoder", b.finish(), Box::new(move |f| {
                let xv = f.matrix(6, toy.d + 1, &x)?;
                let y = mlp.forward(f, xv)?;
                contract(f, y, &w)
            }))
        }
        "gatv2" => {
            let mut b = Builder::new(seed);
            let gat = GatV2::new(&mut b, "gat", &toy.hgt(true));
            let (topo, nodes, edges, w) = toy.graph_inputs();
            ("gatv2", b.finish(), Box::new(move |f| {
                let nv = f.matrix(topo.n_nodes(), toy.w, &nodes)?;
                let ev = f.matrix(topo.n_edges(), toy.w, &edges)?;
                let out = gat.forward(f, nv, Some(ev), &topo)?;
                let y = contract(f, out.nodes, &w)?;
                let e = out.edges.expect("edges present");
                let s = f.tape.sum(e);
                let s = f.tape.scale(s, 0.1);
                f.tape.add(y, s)
            }))
        }
        "global_attention" => {
            let mut b = Builder::new(seed);
            let blk = AttentionBlock::self_attention(&mut b, "global", toy.attn(), toy.ff(toy.hgt_mult, cfg.moe_in_hgt));
            let (x, coords, w) = (toy.matrix(7, toy.w, 1), toy.matrix(7, toy.d, 2), toy.matrix(7, toy.w, 3));
            ("global_attention", b.finish(), Box::new(move |f| {
                let xv = f.matrix(7, toy.w, &x)?;
                let cv = f.matrix(7, toy.d, &coords)?;
                let y = blk.forward_self(f, xv, cv)?;
                contract(f, y, &w)
            }))
        }
        "fusion" | "no_fusion" => {
            let fused = name == "fusion";
            let mut b = Builder::new(seed);
            let blk = HgtBlock::new(&mut b, "hgt", &toy.hgt(fused), true);
            let (topo, nodes, edges, w) = toy.graph_inputs();
            let coords = toy.matrix(topo.n_nodes(), toy.d, 4);
            let label = if fused { "fusion" } else { "no_fusion" };
            (label, b.finish(), Box::new(move |f| {
                let n = topo.n_nodes();
                let nv = f.matrix(n, toy.w, &nodes)?;
                let ev = f.matrix(topo.n_edges(), toy.w, &edges)?;
                let cv = f.matrix(n, toy.d, &coords)?;
                let (y, _) = blk.forward(f, nv, Some(ev), &topo, cv)?;
                contract(f, y, &w)
            }))
        }
        "cross_attention" => {
            let mut b = Builder::new(seed);
            let blk = AttentionBlock::cross_attention(
                &mut b,
                "cross",
                toy.attn(),
                toy.ff(toy.tno_mult, true),
                &[toy.w, toy.w],
            );
            let (x, coords, w) = (toy.matrix(4, toy.w, 1), toy.matrix(4, toy.d, 2), toy.matrix(4, toy.w, 3));
            let (c0, c1) = (toy.matrix(6, toy.w, 4), toy.matrix(5, toy.w, 5));
            ("cross_attention", b.finish(), Box::new(move |f| {
                let xv = f.matrix(4, toy.w, &x)?;
                let cv = f.matrix(4, toy.d, &coords)?;
                let k0 = f.matrix(6, toy.w, &c0)?;
                let k1 = f.matrix(5, toy.w, &c1)?;
                let y = blk.forward_cross(f, xv, &[k0, k1], cv)?;
                contract(f, y, &w)
            }))
        }
        "moe" => {
            let mut b = Builder::new(seed);
            let bank = ExpertBank::new(&mut b, "moe", toy.w, toy.tno_mult * toy.w, toy.d, toy.experts.max(2));
            let (x, coords, w) = (toy.matrix(6, toy.w, 1), toy.matrix(6, toy.d, 2), toy.matrix(6, toy.w, 3));
            ("moe", b.finish(), Box::new(move |f| {
                let xv = f.matrix(6, toy.w, &x)?;
                let cv = f.matrix(6, toy.d, &coords)?;
                let y = bank.forward(f, xv, cv)?;
                contract(f, y, &w)
            }))
        }
        "decoder" => {
            let mut b = Builder::new(seed);
            let mlp = Mlp::zero_output(&mut b, "dec", toy.w, toy.mlp, toy.c_out, toy.layers);
            let mut params = b.finish();
            jitter(&mut params, seed);
            let x = toy.matrix(5, toy.w, 1);
            let w = toy.matrix(5, toy.c_out, 2);
            ("decoder", params, Box::new(move |f| {
                let xv = f.matrix(5, toy.w, &x)?;
                let y = mlp.forward(f, xv)?;
                contract(f, y, &w)
            }))
        }
        "model" => return model_check(cfg, seed),
        other => return Err(GitoError::InvalidArgument(format!("unknown gradient check {other:?}"))),
    };
    compare(name, seed, params, &*loss)
}

type LossFn<'a> = dyn Fn(&mut Forward<'_, f64>) -> Result<Var> + 'a;

/// End-to-end check of the relative-L2 loss on a 6-input, 4-query sample.
fn model_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheck> {
    let toy = Toy::new(cfg, seed);
    let small = ModelConfig {
        hidden_size: toy.w,
        mlp_hidden: toy.mlp,
        query_graph: GraphStrategy::Knn(2),
        input_graph: GraphStrategy::Knn(2),
        ..cfg.clone()
    };
    let mut model = Gito::<f64>::new(small, seed)?;
    jitter(&mut model.params, seed);
    let sample = toy_sample(&model.config, seed)?;
    let prepared = model.prepare(&sample)?;
    let c = model.config.output_field_count;
    let params = std::mem::take(&mut model.params);
    let loss = |f: &mut Forward<'_, f64>| {
        let y = model.forward(f, &prepared)?;
        relative_l2_loss(f, y, &prepared.targets, c)
    };
    compare("model", seed, params, &loss)
}

/// Random sample with 6 points per input function and 4 queries.
pub fn toy_sample(cfg: &ModelConfig, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = cfg.coord_dim;
    let mut cloud = |n: usize, ch: usize| {
        let coords = (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let values = (0..n * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PointCloud::with_values(d, coords, ch, values)
    };
    let inputs = cfg
        .input_channels
        .iter()
        .map(|&ch| cloud(6, ch))
        .collect::<Result<Vec<_>>>()?;
    let q = cloud(4, cfg.output_field_count)?;
    let queries = PointCloud::new(d, q.coords().to_vec())?;
    let targets = q.values().expect("values present").to_vec();
    Sample::new(inputs, queries, targets, cfg.output_field_count)
}

/// Tape gradient vs central differences on sampled coordinates.
fn compare(name: &'static str, seed: u64, mut params: ParamSet<f64>, loss: &LossFn<'_>) -> Result<GradCheck> {
    let grads = {
        let mut f = Forward::new(&params);
        let l = loss(&mut f)?;
        f.tape.backward(l)?
    };
    params.zero_grad();
    grads.accumulate_into(&mut params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut probes = Vec::new();
    for id in params.ids() {
        let n = params.get(id).numel();
        if n <= PER_TENSOR {
            probes.extend((0..n).map(|i| (id, i)));
        } else {
            probes.extend(rand::seq::index::sample(&mut rng, n, PER_TENSOR).into_iter().map(|i| (id, i)));
        }
    }
    let mut analytic = Vec::with_capacity(probes.len());
    let mut numeric = Vec::with_capacity(probes.len());
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut f = Forward::new(p);
        let l = loss(&mut f)?;
        Ok(f.tape.value(l)[0])
    };
    for &(id, i) in &probes {
        analytic.push(params.get(id).grad().map_or(0.0, |g| g[i]));
        let orig = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = orig + FD_EPS;
        let up = eval(&params)?;
        params.get_mut(id).data_mut()[i] = orig - FD_EPS;
        let down = eval(&params)?;
        params.get_mut(id).data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * FD_EPS));
    }
    Ok(GradCheck {
        name,
        seed,
        rel_error: relative_error(&analytic, &numeric, 1e-8),
        probed: probes.len(),
    })
}

/// `sum(y * w)` with fixed weights so every output coordinate matters.
fn contract(f: &mut Forward<'_, f64>, y: Var, w: &[f64]) -> Result<Var> {
    let shape = f.tape.shape(y).to_vec();
    let wv = f.tape.constant(&shape, w.to_vec())?;
    let p = f.tape.mul(y, wv)?;
    Ok(f.tape.sum(p))
}

/// Perturbs every parameter so zero-initialized layers carry gradient.
fn jitter(params: &mut ParamSet<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
}

/// Reduced dimensions derived from a config.
#[derive(Clone, Copy)]
struct Toy {
    seed: u64,
    d: usize,
    w: usize,
    heads: usize,
    mlp: usize,
    layers: usize,
    experts: usize,
    hgt_mult: usize,
    tno_mult: usize,
    c_out: usize,
}

impl Toy {
    fn new(cfg: &ModelConfig, seed: u64) -> Self {
        Toy {
            seed,
            d: cfg.coord_dim,
            w: 2 * cfg.n_heads,
            heads: cfg.n_heads,
            mlp: 8,
            layers: cfg.mlp_layers,
            experts: cfg.n_experts,
            hgt_mult: cfg.hgt_ffn_mult.min(2),
            tno_mult: cfg.tno_ffn_mult.min(2),
            c_out: cfg.output_field_count,
        }
    }

    fn attn(&self) -> AttentionConfig {
        AttentionConfig {
            hidden_size: self.w,
            n_heads: self.heads,
        }
    }

    fn ff(&self, mult: usize, gated: bool) -> FeedForward {
        FeedForward {
            mult,
            experts: gated.then_some(self.experts),
            coord_dim: self.d,
        }
    }

    fn hgt(&self, fusion: bool) -> HgtConfig {
        HgtConfig {
            attention: self.attn(),
            mlp_hidden: self.mlp,
            mlp_layers: self.layers,
            ff: self.ff(self.hgt_mult, true),
            fusion,
        }
    }

    fn matrix(&self, rows: usize, cols: usize, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// 6-node KNN graph with random node and edge states and output weights.
    fn graph_inputs(&self) -> (Topology, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = 6;
        let cloud = PointCloud::new(self.d, self.matrix(n, self.d, 10)).expect("finite coords");
        let topo = build_knn_graph(&cloud, 2).expect("k < n");
        let m = topo.n_edges();
        (
            topo,
            self.matrix(n, self.w, 11),
            self.matrix(m, self.w, 12),
            self.matrix(n, self.w, 13),
        )
    }
}
