//! Transformer neural operator: query embeddings cross-attend onto every
//! encoded input function, optionally followed by self-attention, and an
//! MLP decoder maps the result to output channels.

use crate::attention::{AttentionBlock, AttentionConfig, FeedForward};
use crate::autodiff::Var;
use crate::error::{GitoError, Result};
use crate::nn::{Builder, Forward, Mlp};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct TnoLayer {
    pub cross: AttentionBlock,
    pub self_attn: Option<AttentionBlock>,
}

#[derive(Clone, Debug)]
pub struct Tno {
    pub layers: Vec<TnoLayer>,
    pub decoder: Mlp,
}

/// Shape parameters for [`Tno::new`].
#[derive(Clone, Debug)]
pub struct TnoConfig {
    pub attention: AttentionConfig,
    pub ff: FeedForward,
    pub n_layers: usize,
    /// Width of each encoded input function.
    pub context_widths: Vec<usize>,
    pub self_attention: bool,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub out_channels: usize,
}

impl Tno {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cfg: &TnoConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|i| TnoLayer {
                cross: AttentionBlock::cross_attention(
                    b,
                    &format!("{name}.{i}.cross"),
                    cfg.attention,
                    cfg.ff,
                    &cfg.context_widths,
                ),
                self_attn: cfg.self_attention.then(|| {
                    AttentionBlock::self_attention(b, &format!("{name}.{i}.self"), cfg.attention, cfg.ff)
                }),
            })
            .collect();
        // Zero output layer: an untrained model predicts the target mean.
        let decoder = Mlp::zero_output(
            b,
            &format!("{name}.decoder"),
            cfg.attention.hidden_size,
            cfg.decoder_hidden,
            cfg.out_channels,
            cfg.decoder_layers,
        );
        Tno { layers, decoder }
    }

    pub fn width(&self) -> usize {
        self.decoder.in_dim()
    }

    /// `queries: [n_q, w]`, each input `[n_k_i, w_i]`; returns `[n_q, w]`.
    pub fn encode<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        queries: Var,
        inputs: &[Var],
        coords: Var,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(GitoError::InvalidArgument("no input functions".into()));
        }
        let mut x = queries;
        for layer in &self.layers {
            x = layer.cross.forward_cross(f, x, inputs, coords)?;
            if let Some(s) = &layer.self_attn {
                x = s.forward_self(f, x, coords)?;
            }
        }
        Ok(x)
    }

    /// `[n_q, out_channels]` in normalized target units.
    pub fn forward<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        queries: Var,
        inputs: &[Var],
        coords: Var,
    ) -> Result<Var> {
        let x = self.encode(f, queries, inputs, coords)?;
        self.decoder.forward(f, x)
    }
}
