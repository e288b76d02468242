//! End-to-end model: per-branch graphs and encoders, HGT on the query
//! branch, the operator transformer and the decoder.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionConfig, FeedForward};
use crate::autodiff::{ParamSet, Var};
use crate::checkpoint::{parse_kv, Checkpoint};
use crate::data::{ChannelStats, NormStats, Sample};
use crate::error::{GitoError, Result};
use crate::graph::{compute_features, GraphStrategy, PointCloud, Topology};
use crate::hgt::{Hgt, HgtConfig};
use crate::nn::{Builder, Forward, Mlp};
use crate::tensor::{Precision, Real, Tensor};
use crate::tno::{Tno, TnoConfig};

/// Architecture and graph settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    /// Operator-transformer depth.
    pub n_attention_layers: usize,
    pub n_hgt_blocks: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub query_graph: GraphStrategy,
    pub input_graph: GraphStrategy,
    pub apply_hgt_to_inputs: bool,
    /// Channels per input function; its length is the input-function count.
    pub input_channels: Vec<usize>,
    pub output_field_count: usize,
    pub coord_dim: usize,
    pub precision: Precision,
    /// Concatenation fusion in HGT blocks; `false` sums and applies an MLP.
    pub fusion: bool,
    /// Gated experts in HGT attention blocks; `false` uses a single MLP.
    pub moe_in_hgt: bool,
    pub tno_self_attention: bool,
    pub tno_ffn_mult: usize,
    pub hgt_ffn_mult: usize,
}

impl ModelConfig {
    /// Navier-Stokes setting: hidden 96, 2 layers, 2 experts, 8 heads.
    pub fn ns() -> Self {
        ModelConfig {
            hidden_size: 96,
            n_heads: 8,
            n_experts: 2,
            n_attention_layers: 2,
            n_hgt_blocks: 2,
            mlp_layers: 2,
            mlp_hidden: 96,
            query_graph: GraphStrategy::Radius(0.0525),
            input_graph: GraphStrategy::Radius(0.0525),
            apply_hgt_to_inputs: false,
            input_channels: vec![1],
            output_field_count: 3,
            coord_dim: 2,
            precision: Precision::F32,
            fusion: true,
            moe_in_hgt: true,
            tno_self_attention: true,
            tno_ffn_mult: 4,
            hgt_ffn_mult: 3,
        }
    }

    /// Heat setting: hidden 128, 3 layers, 3 experts, five input functions.
    pub fn heat() -> Self {
        ModelConfig {
            hidden_size: 128,
            n_experts: 3,
            n_attention_layers: 3,
            n_hgt_blocks: 3,
            mlp_layers: 3,
            mlp_hidden: 128,
            query_graph: GraphStrategy::Radius(0.25),
            input_graph: GraphStrategy::Radius(0.25),
            input_channels: vec![1; 5],
            output_field_count: 1,
            ..Self::ns()
        }
    }

    /// Airfoil setting: NS widths, KNN with 16 neighbors, one output field.
    pub fn airfoil() -> Self {
        ModelConfig {
            query_graph: GraphStrategy::Knn(16),
            input_graph: GraphStrategy::Knn(16),
            output_field_count: 1,
            ..Self::ns()
        }
    }

    /// Small model for the synthetic Poisson task.
    pub fn desk() -> Self {
        ModelConfig {
            hidden_size: 32,
            n_heads: 4,
            n_experts: 2,
            n_attention_layers: 2,
            n_hgt_blocks: 2,
            mlp_layers: 2,
            mlp_hidden: 32,
            query_graph: GraphStrategy::Knn(8),
            input_graph: GraphStrategy::Knn(8),
            input_channels: vec![1],
            output_field_count: 1,
            tno_ffn_mult: 2,
            hgt_ffn_mult: 2,
            ..Self::ns()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ns" => Ok(Self::ns()),
            "heat" => Ok(Self::heat()),
            "airfoil" => Ok(Self::airfoil()),
            "desk" | "poisson" => Ok(Self::desk()),
            other => Err(GitoError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn input_function_count(&self) -> usize {
        self.input_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("n_attention_layers", self.n_attention_layers),
            ("n_hgt_blocks", self.n_hgt_blocks),
            ("mlp_layers", self.mlp_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("input_function_count", self.input_channels.len()),
            ("output_field_count", self.output_field_count),
            ("tno_ffn_mult", self.tno_ffn_mult),
            ("hgt_ffn_mult", self.hgt_ffn_mult),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GitoError::Config(format!("{k} must be at least 1")));
        }
        if self.input_channels.contains(&0) {
            return Err(GitoError::Config("input_channels entries must be at least 1".into()));
        }
        if !(2..=3).contains(&self.coord_dim) {
            return Err(GitoError::Config(format!("coord_dim must be 2 or 3, got {}", self.coord_dim)));
        }
        AttentionConfig::new(self.hidden_size, self.n_heads)?;
        for g in [self.query_graph, self.input_graph] {
            match g {
                GraphStrategy::Knn(0) => return Err(GitoError::Config("knn needs k >= 1".into())),
                GraphStrategy::Radius(r) if !(r > 0.0 && r.is_finite()) => {
                    return Err(GitoError::Config(format!("radius must be positive, got {r}")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Flat `key=value` text accepted by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let chans: Vec<String> = self.input_channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(t, "hidden_size={}", self.hidden_size);
        let _ = writeln!(t, "n_heads={}", self.n_heads);
        let _ = writeln!(t, "n_experts={}", self.n_experts);
        let _ = writeln!(t, "n_attention_layers={}", self.n_attention_layers);
        let _ = writeln!(t, "n_hgt_blocks={}", self.n_hgt_blocks);
        let _ = writeln!(t, "mlp_layers={}", self.mlp_layers);
        let _ = writeln!(t, "mlp_hidden={}", self.mlp_hidden);
        let _ = writeln!(t, "activation=gelu");
        let _ = writeln!(t, "query_graph={}", self.query_graph);
        let _ = writeln!(t, "input_graph={}", self.input_graph);
        let _ = writeln!(t, "apply_hgt_to_inputs={}", self.apply_hgt_to_inputs);
        let _ = writeln!(t, "input_function_count={}", self.input_channels.len());
        let _ = writeln!(t, "input_channels={}", chans.join(","));
        let _ = writeln!(t, "output_field_count={}", self.output_field_count);
        let _ = writeln!(t, "coord_dim={}", self.coord_dim);
        let _ = writeln!(t, "precision={}", self.precision.as_str());
        let _ = writeln!(t, "fusion={}", self.fusion);
        let _ = writeln!(t, "moe_in_hgt={}", self.moe_in_hgt);
        let _ = writeln!(t, "tno_self_attention={}", self.tno_self_attention);
        let _ = writeln!(t, "tno_ffn_mult={}", self.tno_ffn_mult);
        let _ = writeln!(t, "hgt_ffn_mult={}", self.hgt_ffn_mult);
        t
    }

    /// Parses config text on top of `base` (or the desk preset when the
    /// text names no `preset`). Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = match kv.iter().find(|(k, _, _)| k == "preset") {
            Some((_, v, _)) => Self::preset(v)?,
            None => Self::desk(),
        };
        let pairs: Vec<(String, String)> = kv.into_iter().filter(|(k, _, _)| k != "preset").map(|(k, v, _)| (k, v)).collect();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut count: Option<usize> = None;
        let mut channels_set = false;
        for (k, v) in pairs {
            match k.as_str() {
                "hidden_size" => self.hidden_size = num(k, v)?,
                "n_heads" => self.n_heads = num(k, v)?,
                "n_experts" => self.n_experts = num(k, v)?,
                "n_attention_layers" => self.n_attention_layers = num(k, v)?,
                "n_hgt_blocks" => self.n_hgt_blocks = num(k, v)?,
                "mlp_layers" => self.mlp_layers = num(k, v)?,
                "mlp_hidden" => self.mlp_hidden = num(k, v)?,
                "activation" => {
                    if !v.eq_ignore_ascii_case("gelu") {
                        return Err(GitoError::Config(format!("activation is fixed to gelu, got {v:?}")));
                    }
                }
                "query_graph" => self.query_graph = GraphStrategy::parse(v)?,
                "input_graph" => self.input_graph = GraphStrategy::parse(v)?,
                "graph_strategy" => {
                    self.query_graph = GraphStrategy::parse(v)?;
                    self.input_graph = self.query_graph;
                }
                "apply_hgt_to_inputs" => self.apply_hgt_to_inputs = flag(k, v)?,
                "input_function_count" => count = Some(num(k, v)?),
                "input_channels" => {
                    self.input_channels = v.split(',').map(|x| num(k, x.trim())).collect::<Result<_>>()?;
                    channels_set = true;
                }
                "output_field_count" => self.output_field_count = num(k, v)?,
                "coord_dim" => self.coord_dim = num(k, v)?,
                "precision" => self.precision = Precision::parse(v)?,
                "fusion" => self.fusion = flag(k, v)?,
                "moe_in_hgt" => self.moe_in_hgt = flag(k, v)?,
                "tno_self_attention" => self.tno_self_attention = flag(k, v)?,
                "tno_ffn_mult" => self.tno_ffn_mult = num(k, v)?,
                "hgt_ffn_mult" => self.hgt_ffn_mult = num(k, v)?,
                other => return Err(GitoError::Config(format!("unknown config key {other:?}"))),
            }
        }
        if let Some(n) = count {
            if channels_set && self.input_channels.len() != n {
                return Err(GitoError::Config(format!(
                    "input_function_count={n} but input_channels lists {}",
                    self.input_channels.len()
                )));
            }
            if !channels_set {
                self.input_channels = vec![1; n];
            }
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl FromStr for ModelConfig {
    type Err = GitoError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn num(k: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| GitoError::Config(format!("{k}: expected a non-negative integer, got {v:?}")))
}

fn flag(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(GitoError::Config(format!("{k}: expected true or false, got {v:?}"))),
    }
}

/// Encoders (and optional HGT stack) for one input function.
#[derive(Clone, Debug)]
struct InputBranch {
    node: Mlp,
    edge: Option<Mlp>,
    hgt: Option<Hgt>,
}

/// Graph and feature data derived from a sample, reusable across epochs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub n_queries: usize,
    pub out_channels: usize,
    query_topo: Topology,
    query_nodes: Vec<f64>,
    query_edges: Vec<f64>,
    inputs: Vec<PreparedInput>,
    /// Physical-unit targets `[n_queries, out_channels]`.
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug)]
struct PreparedInput {
    n: usize,
    nodes: Vec<f64>,
    coords: Vec<f64>,
    graph: Option<(Topology, Vec<f64>)>,
}

/// A parameterized model in precision `T`.
#[derive(Clone, Debug)]
pub struct Gito<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub stats: NormStats,
    query_node: Mlp,
    query_edge: Mlp,
    query_hgt: Hgt,
    inputs: Vec<InputBranch>,
    tno: Tno,
}

impl<T: Real> Gito<T> {
    /// Deterministic initialization from `seed`; normalization starts as identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, d) = (c.hidden_size, c.coord_dim);
        let mut b = Builder::<T>::new(seed);
        let attention = AttentionConfig::new(h, c.n_heads)?;
        let hgt_cfg = HgtConfig {
            attention,
            mlp_hidden: c.mlp_hidden,
            mlp_layers: c.mlp_layers,
            ff: FeedForward {
                mult: c.hgt_ffn_mult,
                experts: c.moe_in_hgt.then_some(c.n_experts),
                coord_dim: d,
            },
            fusion: c.fusion,
        };
        let query_node = Mlp::new(&mut b, "query.node_enc", d, c.mlp_hidden, h, c.mlp_layers);
        let query_edge = Mlp::new(&mut b, "query.edge_enc", d + 1, c.mlp_hidden, h, c.mlp_layers);
        let query_hgt = Hgt::new(&mut b, "query.hgt", &hgt_cfg, c.n_hgt_blocks);
        let width = query_hgt.out_width(h);
        let inputs: Vec<InputBranch> = c
            .input_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                let name = format!("input{i}");
                let node = Mlp::new(&mut b, &format!("{name}.node_enc"), d + ch, c.mlp_hidden, h, c.mlp_layers);
                let (edge, hgt) = if c.apply_hgt_to_inputs {
                    (
                        Some(Mlp::new(&mut b, &format!("{name}.edge_enc"), d + 1 + ch, c.mlp_hidden, h, c.mlp_layers)),
                        Some(Hgt::new(&mut b, &format!("{name}.hgt"), &hgt_cfg, c.n_hgt_blocks)),
                    )
                } else {
                    (None, None)
                };
                InputBranch { node, edge, hgt }
            })
            .collect();
        let context_widths = inputs
            .iter()
            .map(|br| br.hgt.as_ref().map_or(h, |g| g.out_width(h)))
            .collect();
        let tno = Tno::new(
            &mut b,
            "tno",
            &TnoConfig {
                attention: AttentionConfig::new(width, c.n_heads)?,
                ff: FeedForward {
                    mult: c.tno_ffn_mult,
                    experts: Some(c.n_experts),
                    coord_dim: d,
                },
                n_layers: c.n_attention_layers,
                context_widths,
                self_attention: c.tno_self_attention,
                decoder_hidden: c.mlp_hidden,
                decoder_layers: c.mlp_layers,
                out_channels: c.output_field_count,
            },
        );
        let stats = NormStats::identity(d, &c.input_channels, c.output_field_count);
        Ok(Gito {
            params: b.finish(),
            config,
            stats,
            query_node,
            query_edge,
            query_hgt,
            inputs,
            tno,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Width of the operator transformer.
    pub fn tno_width(&self) -> usize {
        self.tno.width()
    }

    pub fn set_stats(&mut self, stats: NormStats) -> Result<()> {
        let c = &self.config;
        let ok = stats.coords.channels() == c.coord_dim
            && stats.targets.channels() == c.output_field_count
            && stats.inputs.len() == c.input_channels.len()
            && stats.inputs.iter().zip(&c.input_channels).all(|(s, &ch)| s.channels() == ch);
        if !ok {
            return Err(GitoError::ChannelMismatch(
                "normalization statistics do not match the model configuration".into(),
            ));
        }
        self.stats = stats;
        Ok(())
    }

    /// Builds graphs on raw coordinates and features on normalized ones.
    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        let c = &self.config;
        if sample.inputs.len() != c.input_function_count() {
            return Err(GitoError::ChannelMismatch(format!(
                "model expects {} input functions, sample has {}",
                c.input_function_count(),
                sample.inputs.len()
            )));
        }
        if sample.out_channels != c.output_field_count {
            return Err(GitoError::ChannelMismatch(format!(
                "model predicts {} fields, sample has {}",
                c.output_field_count, sample.out_channels
            )));
        }
        if sample.queries.dim() != c.coord_dim {
            return Err(GitoError::ChannelMismatch(format!(
                "model expects {}-d coordinates, sample has {}-d",
                c.coord_dim,
                sample.queries.dim()
            )));
        }
        let d = c.coord_dim;
        let query_topo = c.query_graph.build(&sample.queries)?;
        let qn = PointCloud::new(d, self.stats.coords.normalize(sample.queries.coords()))?;
        let (query_nodes, query_edges) = compute_features(&query_topo, &qn)?;
        let mut inputs = Vec::with_capacity(sample.inputs.len());
        for (i, (cloud, st)) in sample.inputs.iter().zip(&self.stats.inputs).enumerate() {
            if cloud.channels() != c.input_channels[i] {
                return Err(GitoError::ChannelMismatch(format!(
                    "input function {i} has {} channels, model expects {}",
                    cloud.channels(),
                    c.input_channels[i]
                )));
            }
            let coords = self.stats.coords.normalize(cloud.coords());
            let values = st.normalize(cloud.values().unwrap_or(&[]));
            let normed = PointCloud::with_values(d, coords.clone(), cloud.channels(), values)?;
            let graph = if c.apply_hgt_to_inputs {
                let topo = c.input_graph.build(cloud)?;
                let (_, edges) = compute_features(&topo, &normed)?;
                Some((topo, edges))
            } else {
                None
            };
            let (nodes, _) = compute_features(&Topology::empty(cloud.len()), &normed)?;
            inputs.push(PreparedInput {
                n: cloud.len(),
                nodes,
                coords,
                graph,
            });
        }
        Ok(Prepared {
            n_queries: sample.n_queries(),
            out_channels: sample.out_channels,
            query_topo,
            query_nodes,
            query_edges,
            inputs,
            targets: sample.targets.clone(),
        })
    }

    /// Records the forward pass; returns `[n_queries, c_out]` in physical units.
    pub fn forward(&self, f: &mut Forward<'_, T>, p: &Prepared) -> Result<Var> {
        let c = &self.config;
        let (d, nq) = (c.coord_dim, p.n_queries);
        let q_coords = f.matrix(nq, d, &p.query_nodes)?;
        let q = self.query_node.forward(f, q_coords)?;
        let m = p.query_topo.n_edges();
        let e = if m > 0 {
            let raw = f.matrix(m, d + 1, &p.query_edges)?;
            Some(self.query_edge.forward(f, raw)?)
        } else {
            None
        };
        let q = self.query_hgt.forward(f, q, e, &p.query_topo, q_coords)?;

        let mut contexts = Vec::with_capacity(p.inputs.len());
        for (br, inp) in self.inputs.iter().zip(&p.inputs) {
            let width = inp.nodes.len() / inp.n;
            let raw = f.matrix(inp.n, width, &inp.nodes)?;
            let mut v = br.node.forward(f, raw)?;
            if let (Some(hgt), Some(enc), Some((topo, edges))) = (&br.hgt, &br.edge, &inp.graph) {
                let coords = f.matrix(inp.n, d, &inp.coords)?;
                let e = if topo.n_edges() > 0 {
                    let raw = f.matrix(topo.n_edges(), edges.len() / topo.n_edges(), edges)?;
                    Some(enc.forward(f, raw)?)
                } else {
                    None
                };
                v = hgt.forward(f, v, e, topo, coords)?;
            }
            contexts.push(v);
        }
        let y = self.tno.forward(f, q, &contexts, q_coords)?;
        self.denormalize_var(f, y)
    }

    fn denormalize_var(&self, f: &mut Forward<'_, T>, y: Var) -> Result<Var> {
        let t = &self.stats.targets;
        let c = t.channels();
        let std = f.tape.constant(&[c], t.std.iter().map(|&x| T::of(x)).collect())?;
        let mean = f.tape.constant(&[c], t.mean.iter().map(|&x| T::of(x)).collect())?;
        let y = f.tape.mul(y, std)?;
        f.tape.add(y, mean)
    }

    /// Physical-unit predictions, row-major `[n_queries, c_out]`.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        let p = self.prepare(sample)?;
        self.predict_prepared(&p)
    }

    pub fn predict_prepared(&self, p: &Prepared) -> Result<Vec<f64>> {
        let mut f = Forward::new(&self.params);
        let y = self.forward(&mut f, p)?;
        Ok(f.tape.value(y).iter().map(|x| x.f64()).collect())
    }

    /// Parameters, statistics and config as a checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in self.params.iter() {
            ck.push(name, t);
        }
        let mut stat = |name: &str, s: &ChannelStats| {
            ck.push(format!("norm.{name}.mean"), &vec_tensor(&s.mean));
            ck.push(format!("norm.{name}.std"), &vec_tensor(&s.std));
        };
        stat("coords", &self.stats.coords);
        for (i, s) in self.stats.inputs.iter().enumerate() {
            stat(&format!("input{i}"), s);
        }
        stat("targets", &self.stats.targets);
        ck.metadata = self.config.to_text();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::parse(&ck.metadata)?;
        let mut model = Self::new(config, 0)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = ck
                .get(&name)
                .ok_or_else(|| GitoError::Config(format!("checkpoint lacks parameter {name}")))?;
            model.params.assign(&name, &t.cast())?;
        }
        let stat = |name: &str| -> Result<ChannelStats> {
            let get = |k: &str| {
                ck.get(&format!("norm.{name}.{k}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| GitoError::Config(format!("checkpoint lacks norm.{name}.{k}")))
            };
            Ok(ChannelStats {
                mean: get("mean")?,
                std: get("std")?,
            })
        };
        let stats = NormStats {
            coords: stat("coords")?,
            inputs: (0..model.config.input_function_count())
                .map(|i| stat(&format!("input{i}")))
                .collect::<Result<_>>()?,
            targets: stat("targets")?,
        };
        model.set_stats(stats)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path, T::PRECISION)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Builds a model from `config` and `seed`.
pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<Gito<T>> {
    Gito::new(config, seed)
}

/// Physical-unit predictions for `sample`.
pub fn gito_forward<T: Real>(model: &Gito<T>, sample: &Sample) -> Result<Vec<f64>> {
    model.predict(sample)
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).expect("non-empty stats")
}
