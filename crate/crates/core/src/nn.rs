//! Parameter initialization and the small building blocks shared by every
//! module: affine maps, GELU MLPs and affine layer norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A tape bound to the parameter set it reads from.
pub struct Forward<'p, T: Real> {
    pub tape: Tape<T>,
    pub params: &'p ParamSet<T>,
}

impl<'p, T: Real> Forward<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Forward {
            tape: Tape::new(),
            params,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Records a detached `[rows, cols]` matrix from f64 data.
    pub fn matrix(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        self.tape
            .constant(&[rows, cols], data.iter().map(|&x| T::of(x)).collect())
    }
}

/// Deterministic parameter factory.
pub struct Builder<T> {
    pub params: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.params
            .register(name, Tensor::new(shape, data).expect("positive dims"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.params.register(
            name,
            Tensor::new(shape, vec![T::of(value); n]).expect("positive dims"),
        )
    }

    pub fn finish(self) -> ParamSet<T> {
        self.params
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `+-1/sqrt(in_dim)` for weight and bias.
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: b.uniform(format!("{name}.weight"), &[in_dim, out_dim], bound),
            bias: b.uniform(format!("{name}.bias"), &[out_dim], bound),
            in_dim,
            out_dim,
        }
    }

    /// Zero weight and bias; the layer initially outputs zeros.
    pub fn zeroed<T: Real>(b: &mut Builder<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: b.constant(format!("{name}.weight"), &[in_dim, out_dim], 0.0),
            bias: b.constant(format!("{name}.bias"), &[out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let y = f.tape.matmul(x, w)?;
        f.tape.add(y, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// GELU MLP: `hidden_layers` hidden layers of width `hidden`, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        hidden_layers: usize,
    ) -> Self {
        assert!(hidden_layers >= 1);
        let mut layers = vec![Linear::new(b, &format!("{name}.0"), in_dim, hidden)];
        for i in 1..hidden_layers {
            layers.push(Linear::new(b, &format!("{name}.{i}"), hidden, hidden));
        }
        layers.push(Linear::new(
            b,
            &format!("{name}.{hidden_layers}"),
            hidden,
            out_dim,
        ));
        Mlp { layers }
    }

    /// Like [`Mlp::new`] with the output layer zero-initialized.
    pub fn zero_output<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        hidden_layers: usize,
    ) -> Self {
        let mut layers = vec![Linear::new(b, &format!("{name}.0"), in_dim, hidden)];
        for i in 1..hidden_layers {
            layers.push(Linear::new(b, &format!("{name}.{i}"), hidden, hidden));
        }
        layers.push(Linear::zeroed(
            b,
            &format!("{name}.{hidden_layers}"),
            hidden,
            out_dim,
        ));
        Mlp { layers }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h)?;
            if i < last {
                h = f.tape.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn out_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_layer().out_dim
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, width: usize) -> Self {
        Norm {
            gain: b.constant(format!("{name}.gain"), &[width], 1.0),
            bias: b.constant(format!("{name}.bias"), &[width], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let n = f.tape.layer_norm(x);
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        let y = f.tape.mul(n, g)?;
        f.tape.add(y, b)
    }
}
