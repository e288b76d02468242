//! Hybrid graph-transformer blocks: GATv2 message passing on the local
//! graph alongside global linear self-attention, fused by a second
//! self-attention over the concatenated node states.

use crate::attention::{AttentionBlock, AttentionConfig, FeedForward};
use crate::autodiff::Var;
use crate::error::{GitoError, Result};
use crate::graph::Topology;
use crate::nn::{Builder, Forward, Linear, Mlp};
use crate::tensor::Real;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Shape parameters shared by every block of an HGT stack.
#[derive(Clone, Copy, Debug)]
pub struct HgtConfig {
    pub attention: AttentionConfig,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub ff: FeedForward,
    pub fusion: bool,
}

/// Multi-head GATv2 layer with an edge-state update.
///
/// For edge `j -> i` with state `e_ij`:
/// `s_ij = a . LeakyReLU(W [v_i | v_j | e_ij])` per head,
/// `alpha_ij = softmax_j(s_ij)` over the in-edges of `i`,
/// `v_i' = W_self v_i + sum_j alpha_ij W_msg [v_j | e_ij]` and
/// `e_ij' = e_ij + MLP([v_i | v_j | e_ij])`.
#[derive(Clone, Debug)]
pub struct GatV2 {
    pub heads: usize,
    pub width: usize,
    score: Linear,
    attn_vec: crate::autodiff::ParamId,
    self_map: Linear,
    message: Linear,
    edge_mlp: Mlp,
}

/// Output of one GATv2 pass.
pub struct GatOutput {
    pub nodes: Var,
    pub edges: Option<Var>,
    /// `[n_edges, heads]` attention coefficients.
    pub alpha: Option<Var>,
}

impl GatV2 {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cfg: &HgtConfig) -> Self {
        let w = cfg.attention.hidden_size;
        let bound = 1.0 / (w as f64).sqrt();
        GatV2 {
            heads: cfg.attention.n_heads,
            width: w,
            score: Linear::new(b, &format!("{name}.score"), 3 * w, w),
            attn_vec: b.uniform(format!("{name}.attn"), &[w], bound),
            self_map: Linear::new(b, &format!("{name}.self"), w, w),
            message: Linear::new(b, &format!("{name}.message"), 2 * w, w),
            edge_mlp: Mlp::new(
                b,
                &format!("{name}.edge_mlp"),
                3 * w,
                cfg.mlp_hidden,
                w,
                cfg.mlp_layers,
            ),
        }
    }

    /// `nodes: [N, w]`, `edges: [M, w]` aligned with `topo.edges()`.
    pub fn forward<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        nodes: Var,
        edges: Option<Var>,
        topo: &Topology,
    ) -> Result<GatOutput> {
        let n = topo.n_nodes();
        let self_term = self.self_map.forward(f, nodes)?;
        let Some(e) = edges else {
            if topo.n_edges() != 0 {
                return Err(GitoError::InvalidArgument(
                    "edge states missing for a non-empty graph".into(),
                ));
            }
            return Ok(GatOutput {
                nodes: self_term,
                edges: None,
                alpha: None,
            });
        };
        let m = topo.n_edges();
        if f.tape.shape(e) != [m, self.width] {
            return Err(GitoError::shape("gatv2 edges", f.tape.shape(e), &[m, self.width]));
        }
        let (h, dh) = (self.heads, self.width / self.heads);
        let vi = f.tape.gather_rows(nodes, topo.receivers().clone())?;
        let vj = f.tape.gather_rows(nodes, topo.senders().clone())?;
        let cat = f.tape.concat_last(&[vi, vj, e])?;

        let z = self.score.forward(f, cat)?;
        let z = f.tape.leaky_relu(z, T::of(LEAKY_SLOPE));
        let a = f.param(self.attn_vec);
        let za = f.tape.mul(z, a)?;
        let za = f.tape.reshape(za, &[m, h, dh])?;
        let logits = f.tape.sum_last(za);
        let alpha = f.tape.segment_softmax(logits, topo.receivers().clone(), n)?;

        let mj = f.tape.concat_last(&[vj, e])?;
        let msg = self.message.forward(f, mj)?;
        let msg = f.tape.reshape(msg, &[m, h, dh])?;
        let a3 = f.tape.reshape(alpha, &[m, h, 1])?;
        let weighted = f.tape.mul(msg, a3)?;
        let weighted = f.tape.reshape(weighted, &[m, self.width])?;
        let agg = f.tape.scatter_add_rows(weighted, topo.receivers().clone(), n)?;
        let nodes_out = f.tape.add(self_term, agg)?;

        let de = self.edge_mlp.forward(f, cat)?;
        let edges_out = f.tape.add(e, de)?;
        Ok(GatOutput {
            nodes: nodes_out,
            edges: Some(edges_out),
            alpha: Some(alpha),
        })
    }
}

#[derive(Clone, Debug)]
enum Mix {
    /// Self-attention over `[V_G | V_T]`, optionally projected back to `w`.
    Fusion {
        block: AttentionBlock,
        project: Option<Linear>,
    },
    /// `MLP(V_G + V_T)`.
    Sum(Mlp),
}

/// One hybrid block.
#[derive(Clone, Debug)]
pub struct HgtBlock {
    pub gnn: GatV2,
    pub global: AttentionBlock,
    mix: Mix,
}

impl HgtBlock {
    /// `project_out` keeps the fused output at width `w`; without it the
    /// block emits `2w` (fusion only).
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cfg: &HgtConfig, project_out: bool) -> Self {
        let w = cfg.attention.hidden_size;
        let gnn = GatV2::new(b, &format!("{name}.gnn"), cfg);
        let global = AttentionBlock::self_attention(b, &format!("{name}.global"), cfg.attention, cfg.ff);
        let mix = if cfg.fusion {
            let wide = AttentionConfig {
                hidden_size: 2 * w,
                n_heads: cfg.attention.n_heads,
            };
            let block = AttentionBlock::self_attention(b, &format!("{name}.fusion"), wide, cfg.ff);
            let project = project_out.then(|| Linear::new(b, &format!("{name}.project"), 2 * w, w));
            Mix::Fusion { block, project }
        } else {
            Mix::Sum(Mlp::new(b, &format!("{name}.mix"), w, cfg.mlp_hidden, w, cfg.mlp_layers))
        };
        HgtBlock { gnn, global, mix }
    }

    /// Width of the node states this block emits.
    pub fn out_width(&self) -> usize {
        match &self.mix {
            Mix::Fusion { project: None, block } => block.config.hidden_size,
            _ => self.global.config.hidden_size,
        }
    }

    pub fn forward<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        nodes: Var,
        edges: Option<Var>,
        topo: &Topology,
        coords: Var,
    ) -> Result<(Var, Option<Var>)> {
        let g = self.gnn.forward(f, nodes, edges, topo)?;
        let t = self.global.forward_self(f, nodes, coords)?;
        let out = match &self.mix {
            Mix::Fusion { block, project } => {
                let cat = f.tape.concat_last(&[g.nodes, t])?;
                let fused = block.forward_self(f, cat, coords)?;
                match project {
                    Some(p) => p.forward(f, fused)?,
                    None => fused,
                }
            }
            Mix::Sum(mlp) => {
                let s = f.tape.add(g.nodes, t)?;
                mlp.forward(f, s)?
            }
        };
        Ok((out, g.edges))
    }
}

/// A stack of hybrid blocks; the last fused block skips the projection.
#[derive(Clone, Debug)]
pub struct Hgt {
    pub blocks: Vec<HgtBlock>,
}

impl Hgt {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cfg: &HgtConfig, n_blocks: usize) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| HgtBlock::new(b, &format!("{name}.{i}"), cfg, i + 1 < n_blocks))
            .collect();
        Hgt { blocks }
    }

    pub fn out_width(&self, in_width: usize) -> usize {
        self.blocks.last().map_or(in_width, HgtBlock::out_width)
    }

    pub fn forward<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        nodes: Var,
        edges: Option<Var>,
        topo: &Topology,
        coords: Var,
    ) -> Result<Var> {
        let (mut v, mut e) = (nodes, edges);
        for block in &self.blocks {
            (v, e) = block.forward(f, v, e, topo, coords)?;
        }
        Ok(v)
    }
}
