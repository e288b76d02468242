//! Linear-complexity attention, the pre-norm residual attention block and
//! the spatially gated mixture-of-experts feed-forward layer.

use crate::autodiff::{Tape, Var};
use crate::error::{GitoError, Result};
use crate::nn::{Builder, Forward, Linear, Mlp, Norm};
use crate::tensor::{Real, Tensor};

/// Width and head count of an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub hidden_size: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(hidden_size: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || hidden_size == 0 || hidden_size % n_heads != 0 {
            return Err(GitoError::Config(format!(
                "hidden size {hidden_size} is not divisible by {n_heads} heads"
            )));
        }
        Ok(AttentionConfig {
            hidden_size,
            n_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

/// Single-head normalized linear attention on plain tensors.
///
/// `q: [n_q, h]`, `k, v: [n_k, h]`; rows of `q` and `k` are softmax-normalized
/// along the feature axis.
pub fn linear_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if k.shape().len() == 2 && k.shape()[0] == 0 {
        return Err(GitoError::InvalidArgument("linear attention needs at least one key".into()));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
    let out = tape.linear_attention(qv, kv, vv, 1)?;
    Ok(tape.to_tensor(out))
}

/// Per-expert MLPs mixed by a softmax gate on spatial coordinates.
///
/// Without a gate the layer is a single plain MLP.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<Mlp>,
    pub gate: Option<Mlp>,
}

impl ExpertBank {
    /// `n_experts` experts `width -> inner -> width` and a gate
    /// `coord_dim -> gate_hidden -> n_experts`.
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        width: usize,
        inner: usize,
        coord_dim: usize,
        n_experts: usize,
    ) -> Self {
        assert!(n_experts >= 1);
        let experts = (0..n_experts)
            .map(|e| Mlp::new(b, &format!("{name}.expert{e}"), width, inner, width, 1))
            .collect();
        let gate = Mlp::new(b, &format!("{name}.gate"), coord_dim, width, n_experts, 1);
        ExpertBank {
            experts,
            gate: Some(gate),
        }
    }

    /// Ungated single MLP `width -> inner -> width`.
    pub fn plain<T: Real>(b: &mut Builder<T>, name: &str, width: usize, inner: usize) -> Self {
        ExpertBank {
            experts: vec![Mlp::new(b, &format!("{name}.expert0"), width, inner, width, 1)],
            gate: None,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// `[n, n_experts]` softmax gate weights, or `None` when ungated.
    pub fn gate_weights<T: Real>(&self, f: &mut Forward<'_, T>, coords: Var) -> Result<Option<Var>> {
        match &self.gate {
            Some(g) => {
                let logits = g.forward(f, coords)?;
                Ok(Some(f.tape.softmax(logits, 1)?))
            }
            None => Ok(None),
        }
    }

    /// `out_i = sum_e softmax(gate(coords_i))_e * expert_e(x_i)`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, coords: Var) -> Result<Var> {
        let Some(gates) = self.gate_weights(f, coords)? else {
            return self.experts[0].forward(f, x);
        };
        let mut acc = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let y = expert.forward(f, x)?;
            let w = f.tape.slice_last(gates, e, 1)?;
            let term = f.tape.mul(y, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => f.tape.add(a, term)?,
            });
        }
        Ok(acc.expect("at least one expert"))
    }

    fn zero_outputs<T: Real>(&self, b: &mut Builder<T>) {
        for e in &self.experts {
            for id in e.out_layer().param_ids() {
                b.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
}

/// Key/value projections for one context set.
#[derive(Clone, Debug)]
struct KvProjection {
    norm: Option<Norm>,
    key: Linear,
    value: Linear,
}

/// Shape of the feed-forward part of an [`AttentionBlock`].
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    /// Expert hidden width as a multiple of the block width.
    pub mult: usize,
    /// `None` selects a single ungated MLP.
    pub experts: Option<usize>,
    pub coord_dim: usize,
}

/// Pre-norm residual attention block:
/// `x1 = x + O(Attn(Norm(x), Norm(ctx)))`, `y = x1 + MoE(Norm(x1), coords)`.
///
/// Self-attention blocks draw keys and values from `x`; cross-attention
/// blocks carry one key/value projection per context set and average the
/// per-set attention outputs before the output projection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    norm_in: Norm,
    query: Linear,
    kv: Vec<KvProjection>,
    output: Linear,
    norm_ff: Norm,
    pub ffn: ExpertBank,
    cross: bool,
}

impl AttentionBlock {
    pub fn self_attention<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        config: AttentionConfig,
        ff: FeedForward,
    ) -> Self {
        let w = config.hidden_size;
        let norm_in = Norm::new(b, &format!("{name}.norm_in"), w);
        let query = Linear::new(b, &format!("{name}.query"), w, w);
        let kv = vec![KvProjection {
            norm: None,
            key: Linear::new(b, &format!("{name}.key"), w, w),
            value: Linear::new(b, &format!("{name}.value"), w, w),
        }];
        Self::finish(b, name, config, ff, norm_in, query, kv, false)
    }

    /// Cross-attention with one key/value projection per context width.
    pub fn cross_attention<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        config: AttentionConfig,
        ff: FeedForward,
        context_widths: &[usize],
    ) -> Self {
        assert!(!context_widths.is_empty());
        let w = config.hidden_size;
        let norm_in = Norm::new(b, &format!("{name}.norm_in"), w);
        let query = Linear::new(b, &format!("{name}.query"), w, w);
        let kv = context_widths
            .iter()
            .enumerate()
            .map(|(i, &cw)| KvProjection {
                norm: Some(Norm::new(b, &format!("{name}.ctx{i}.norm"), cw)),
                key: Linear::new(b, &format!("{name}.ctx{i}.key"), cw, w),
                value: Linear::new(b, &format!("{name}.ctx{i}.value"), cw, w),
            })
            .collect();
        Self::finish(b, name, config, ff, norm_in, query, kv, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        config: AttentionConfig,
        ff: FeedForward,
        norm_in: Norm,
        query: Linear,
        kv: Vec<KvProjection>,
        cross: bool,
    ) -> Self {
        let w = config.hidden_size;
        let output = Linear::new(b, &format!("{name}.output"), w, w);
        let norm_ff = Norm::new(b, &format!("{name}.norm_ff"), w);
        let ffn = match ff.experts {
            Some(e) => ExpertBank::new(b, &format!("{name}.moe"), w, ff.mult * w, ff.coord_dim, e),
            None => ExpertBank::plain(b, &format!("{name}.mlp"), w, ff.mult * w),
        };
        AttentionBlock {
            config,
            norm_in,
            query,
            kv,
            output,
            norm_ff,
            ffn,
            cross,
        }
    }

    pub fn is_cross(&self) -> bool {
        self.cross
    }

    pub fn n_contexts(&self) -> usize {
        self.kv.len()
    }

    /// Zeroes the attention output projection and every expert's output
    /// layer, making the block an identity map.
    pub fn zero_residual_branches<T: Real>(&self, b: &mut Builder<T>) {
        for id in self.output.param_ids() {
            b.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        self.ffn.zero_outputs(b);
    }

    /// Self-attention forward. `coords: [n, d]` feeds the expert gate.
    pub fn forward_self<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, coords: Var) -> Result<Var> {
        if self.cross {
            return Err(GitoError::InvalidArgument(
                "cross-attention block called without context".into(),
            ));
        }
        let xn = self.norm_in.forward(f, x)?;
        let q = self.query.forward(f, xn)?;
        let k = self.kv[0].key.forward(f, xn)?;
        let v = self.kv[0].value.forward(f, xn)?;
        let attn = f.tape.linear_attention(q, k, v, self.config.n_heads)?;
        self.residual_tail(f, x, attn, coords)
    }

    /// Cross-attention over one or more context sets (one per key/value projection).
    pub fn forward_cross<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        x: Var,
        contexts: &[Var],
        coords: Var,
    ) -> Result<Var> {
        if !self.cross {
            return Err(GitoError::InvalidArgument(
                "self-attention block called with context".into(),
            ));
        }
        if contexts.is_empty() {
            return Err(GitoError::InvalidArgument("empty key/value list".into()));
        }
        if contexts.len() != self.kv.len() {
            return Err(GitoError::InvalidArgument(format!(
                "{} context sets for a block built with {}",
                contexts.len(),
                self.kv.len()
            )));
        }
        let xn = self.norm_in.forward(f, x)?;
        let q = self.query.forward(f, xn)?;
        let mut sum = None;
        for (proj, &ctx) in self.kv.iter().zip(contexts) {
            let cn = match &proj.norm {
                Some(n) => n.forward(f, ctx)?,
                None => ctx,
            };
            let k = proj.key.forward(f, cn)?;
            let v = proj.value.forward(f, cn)?;
            let a = f.tape.linear_attention(q, k, v, self.config.n_heads)?;
            sum = Some(match sum {
                None => a,
                Some(s) => f.tape.add(s, a)?,
            });
        }
        let sum = sum.expect("non-empty contexts");
        let attn = if contexts.len() > 1 {
            f.tape.scale(sum, T::one() / T::of(contexts.len() as f64))
        } else {
            sum
        };
        self.residual_tail(f, x, attn, coords)
    }

    fn residual_tail<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, attn: Var, coords: Var) -> Result<Var> {
        let o = self.output.forward(f, attn)?;
        let x1 = f.tape.add(x, o)?;
        let hn = self.norm_ff.forward(f, x1)?;
        let ff = self.ffn.forward(f, hn, coords)?;
        f.tape.add(x1, ff)
    }
}
