//! Reverse-mode tape over dense tensors.
//!
//! Every primitive pushes one node holding its forward value. Nodes are
//! appended in evaluation order, so walking the node list backwards is a
//! valid reverse topological order. A tape lives for one forward pass and is
//! consumed by [`Tape::backward`].

use std::sync::Arc;

use super::params::{ParamId, ParamSet};
use crate::error::{GitoError, Result};
use crate::tensor::{Precision, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand has one element.
    Scalar,
    /// Right operand's shape equals the trailing dims of the left operand.
    Row(usize),
    /// Right operand equals the left shape with the last axis set to 1.
    Col(usize),
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let an: usize = a.iter().product();
        let bn: usize = b.iter().product();
        if a == b {
            Ok(Bcast::Same)
        } else if bn == 1 {
            Ok(Bcast::Scalar)
        } else if b.len() <= a.len() && a.ends_with(b) {
            Ok(Bcast::Row(bn))
        } else if a.len() == b.len()
            && b.last() == Some(&1)
            && a[..a.len() - 1] == b[..b.len() - 1]
        {
            Ok(Bcast::Col(an / bn))
        } else {
            Err(GitoError::shape(op, a, b))
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct AttnCache<T> {
    heads: usize,
    q_soft: Vec<T>,
    k_soft: Vec<T>,
    /// Per head `dh x dh` key-value moments.
    kv: Vec<T>,
    /// Per head key sums.
    ksum: Vec<T>,
    /// `n_q x heads` normalizers after the guard.
    den: Vec<T>,
    /// Whether the guard replaced the raw normalizer.
    clamped: Vec<bool>,
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var, Bcast),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    SliceLast(Var, usize),
    Softmax(Var, usize),
    /// Input and its standard-normal CDF.
    Gelu(Var, Vec<T>),
    LeakyRelu(Var, T),
    LayerNorm(Var, Vec<T>),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumLast(Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    LinearAttention(Var, Var, Var, Box<AttnCache<T>>),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower bound on the linear-attention normalizer.
pub const ATTENTION_DEN_GUARD: f64 = 1e-12;

/// Operation recorder for one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("rank >= 1");
    (numel(shape) / last, last)
}

fn softmax_in_place<T: Real>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// `out[i] = f(a[i], b[map(i)])` without per-element index arithmetic.
fn broadcast_map<T: Real>(bc: Bcast, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    match bc {
        Bcast::Same => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        Bcast::Scalar => out.extend(a.iter().map(|&x| f(x, b[0]))),
        Bcast::Row(n) => {
            for row in a.chunks_exact(n) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        Bcast::Col(last) => {
            for (row, &y) in a.chunks_exact(last).zip(b) {
                out.extend(row.iter().map(|&x| f(x, y)));
            }
        }
    }
    out
}

/// `ga[i] += f(g[i], b[map(i)])`.
fn broadcast_accumulate<T: Real>(bc: Bcast, ga: &mut [T], g: &[T], b: &[T], f: impl Fn(T, T) -> T) {
    match bc {
        Bcast::Same => {
            for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(b) {
                *x = *x + f(gi, y);
            }
        }
        Bcast::Scalar => ga.iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + f(gi, b[0])),
        Bcast::Row(n) => {
            for (grow, row) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                for ((x, &gi), &y) in grow.iter_mut().zip(row).zip(b) {
                    *x = *x + f(gi, y);
                }
            }
        }
        Bcast::Col(last) => {
            for ((grow, row), &y) in ga.chunks_exact_mut(last).zip(g.chunks_exact(last)).zip(b) {
                for (x, &gi) in grow.iter_mut().zip(row) {
                    *x = *x + f(gi, y);
                }
            }
        }
    }
}

/// `gb[map(i)] += f(g[i], a[i], b[map(i)])`.
fn broadcast_reduce<T: Real>(bc: Bcast, gb: &mut [T], g: &[T], a: &[T], b: &[T], f: impl Fn(T, T, T) -> T) {
    match bc {
        Bcast::Same => {
            for (((x, &gi), &ai), &y) in gb.iter_mut().zip(g).zip(a).zip(b) {
                *x = *x + f(gi, ai, y);
            }
        }
        Bcast::Scalar => {
            let mut s = T::zero();
            for (&gi, &ai) in g.iter().zip(a) {
                s = s + f(gi, ai, b[0]);
            }
            gb[0] = gb[0] + s;
        }
        Bcast::Row(n) => {
            for (grow, arow) in g.chunks_exact(n).zip(a.chunks_exact(n)) {
                for (((x, &gi), &ai), &y) in gb.iter_mut().zip(grow).zip(arow).zip(b) {
                    *x = *x + f(gi, ai, y);
                }
            }
        }
        Bcast::Col(last) => {
            for (((x, grow), arow), &y) in gb.iter_mut().zip(g.chunks_exact(last)).zip(a.chunks_exact(last)).zip(b) {
                let mut s = T::zero();
                for (&gi, &ai) in grow.iter().zip(arow) {
                    s = s + f(gi, ai, y);
                }
                *x = *x + s;
            }
        }
    }
}

/// Standard-normal CDF, evaluated in the working precision.
fn normal_cdf<T: Real>(x: T) -> T {
    match T::PRECISION {
        Precision::F32 => T::of(0.5 * (1.0 + libm::erff(x.f64() as f32 * std::f32::consts::FRAC_1_SQRT_2)) as f64),
        Precision::F64 => T::of(0.5 * (1.0 + libm::erf(x.f64() * std::f64::consts::FRAC_1_SQRT_2))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a tensor as a leaf; tracks gradients when the tensor does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a detached constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(GitoError::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    /// Records a parameter leaf whose gradient flows back into `params`.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let t = params.get(id);
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let bc = Bcast::resolve(name, self.shape(a), self.shape(b))?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = match kind {
            Binary::Add => broadcast_map(bc, av, bv, |x, y| x + y),
            Binary::Sub => broadcast_map(bc, av, bv, |x, y| x - y),
            Binary::Mul => broadcast_map(bc, av, bv, |x, y| x * y),
            Binary::Div => broadcast_map(bc, av, bv, |x, y| x / y),
        };
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, shape, Op::Binary(kind, a, b, bc), ng))
    }

    /// `a + b`; `b` may broadcast (scalar, trailing dims, or size-1 last axis).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(out, shape, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(out, shape, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(out, shape, Op::Sqrt(a), ng)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let cdf: Vec<T> = self.value(a).iter().map(|&x| normal_cdf(x)).collect();
        let out = self.value(a).iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(out, shape, Op::Gelu(a, cdf), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(out, shape, Op::LeakyRelu(a, slope), ng)
    }

    // ---- linear algebra & layout -------------------------------------

    /// `[.., k] x [k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(GitoError::shape("matmul", ash, bsh));
        }
        let (m, k) = split_last(ash);
        let n = bsh[1];
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, shape, Op::MatMul(a, b), ng))
    }

    /// Swaps the two axes of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a);
        if sh.len() != 2 {
            return Err(GitoError::shape("transpose", sh, &[0, 0]));
        }
        let (r, c) = (sh[0], sh[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, vec![c, r], Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(GitoError::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(a), ng))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GitoError::InvalidArgument("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let sh = self.shape(*p);
            if sh[..sh.len() - 1] != lead[..] {
                return Err(GitoError::shape("concat_last", self.shape(*first), sh));
            }
            widths.push(*sh.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.any_grad(parts);
        Ok(self.push(out, shape, Op::ConcatLast(parts.to_vec()), ng))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let (rows, w) = split_last(&sh);
        if len == 0 || start + len > w {
            return Err(GitoError::shape("slice_last", &sh, &[start, len]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * w + start..r * w + start + len]);
        }
        let mut shape = sh;
        *shape.last_mut().unwrap() = len;
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, shape, Op::SliceLast(a, start), ng))
    }

    // ---- normalization ------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() {
            return Err(GitoError::shape("softmax", &sh, &[axis]));
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out = self.value(a).to_vec();
        if inner == 1 {
            for chunk in out.chunks_mut(len) {
                softmax_in_place(chunk);
            }
        } else {
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for l in 0..len {
                        buf[l] = out[(o * len + l) * inner + i];
                    }
                    softmax_in_place(&mut buf);
                    for l in 0..len {
                        out[(o * len + l) * inner + i] = buf[l];
                    }
                }
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, sh, Op::Softmax(a, axis), ng))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        let (rows, w) = split_last(&sh);
        let eps = T::of(LAYER_NORM_EPS);
        let wf = T::of(w as f64);
        let v = self.value(a);
        let mut out = vec![T::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v[r * w..(r + 1) * w];
            let mean = x.iter().copied().sum::<T>() / wf;
            let var = x.iter().map(|&xi| (xi - mean) * (xi - mean)).sum::<T>() / wf;
            let is = T::one() / (var + eps).sqrt();
            for (o, &xi) in out[r * w..(r + 1) * w].iter_mut().zip(x) {
                *o = (xi - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.any_grad(&[a]);
        self.push(out, sh, Op::LayerNorm(a, inv_std), ng)
    }

    /// Softmax of `[M, H]` logits within groups of rows sharing a segment id.
    pub fn segment_softmax(
        &mut self,
        a: Var,
        segments: Arc<[usize]>,
        n_segments: usize,
    ) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 || sh[0] != segments.len() {
            return Err(GitoError::shape("segment_softmax", &sh, &[segments.len()]));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(GitoError::InvalidArgument(format!(
                "segment id {bad} >= {n_segments}"
            )));
        }
        let h = sh[1];
        let v = self.value(a);
        let mut max = vec![T::neg_infinity(); n_segments * h];
        for (e, &s) in segments.iter().enumerate() {
            for k in 0..h {
                let m = &mut max[s * h + k];
                *m = m.max(v[e * h + k]);
            }
        }
        let mut out = vec![T::zero(); v.len()];
        let mut sum = vec![T::zero(); n_segments * h];
        for (e, &s) in segments.iter().enumerate() {
            for k in 0..h {
                let ex = (v[e * h + k] - max[s * h + k]).exp();
                out[e * h + k] = ex;
                sum[s * h + k] = sum[s * h + k] + ex;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for k in 0..h {
                out[e * h + k] = out[e * h + k] / sum[s * h + k];
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, sh, Op::SegmentSoftmax(a, segments, n_segments), ng))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.any_grad(&[a]);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let ng = self.any_grad(&[a]);
        self.push(vec![s], vec![1], Op::Mean(a), ng)
    }

    /// Sums over every axis but the last: `[.., c] -> [c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (rows, w) = split_last(self.shape(a));
        let v = self.value(a);
        let mut out = vec![T::zero(); w];
        for r in 0..rows {
            for (o, &x) in out.iter_mut().zip(&v[r * w..(r + 1) * w]) {
                *o = *o + x;
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, vec![w], Op::SumRows(a), ng)
    }

    /// Sums over the last axis: `[.., c] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        let (rows, w) = split_last(&sh);
        let v = self.value(a);
        let out = (0..rows)
            .map(|r| v[r * w..(r + 1) * w].iter().copied().sum())
            .collect();
        let shape = if sh.len() > 1 {
            sh[..sh.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let ng = self.any_grad(&[a]);
        self.push(out, shape, Op::SumLast(a), ng)
    }

    // ---- indexing -------------------------------------------------------

    /// Row gather: `[N, w]` indexed by `idx` gives `[len(idx), w]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(GitoError::shape("gather_rows", &sh, &[idx.len()]));
        }
        let (n, w) = (sh[0], sh[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GitoError::InvalidArgument(format!("gather index {bad} >= {n}")));
        }
        if idx.is_empty() {
            return Err(GitoError::InvalidArgument("gather with empty index".into()));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            out.extend_from_slice(&v[i * w..(i + 1) * w]);
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, vec![idx.len(), w], Op::Gather(a, idx), ng))
    }

    /// Row scatter-add: row `e` of `[M, w]` is added into output row `idx[e]`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, n: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 || sh[0] != idx.len() || n == 0 {
            return Err(GitoError::shape("scatter_add_rows", &sh, &[idx.len(), n]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GitoError::InvalidArgument(format!("scatter index {bad} >= {n}")));
        }
        let w = sh[1];
        let v = self.value(a);
        let mut out = vec![T::zero(); n * w];
        for (e, &i) in idx.iter().enumerate() {
            for (o, &x) in out[i * w..(i + 1) * w].iter_mut().zip(&v[e * w..(e + 1) * w]) {
                *o = *o + x;
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, vec![n, w], Op::ScatterAdd(a, idx), ng))
    }

    // ---- attention ------------------------------------------------------

    /// Multi-head normalized linear attention.
    ///
    /// `q: [n_q, w]`, `k, v: [n_k, w]`, heads split `w` into equal blocks.
    /// Within each head, rows of `q` and `k` are softmax-normalized over
    /// the feature axis and
    /// `out_i = (q~_i . sum_j k~_j v_j^T) / (q~_i . sum_j k~_j)`.
    /// No `n_q x n_k` matrix is formed.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 2 || ks.len() != 2 || ks != vs || qs[1] != ks[1] {
            return Err(GitoError::shape("linear_attention", &qs, &ks));
        }
        if heads == 0 || qs[1] % heads != 0 {
            return Err(GitoError::InvalidArgument(format!(
                "width {} not divisible by {heads} heads",
                qs[1]
            )));
        }
        let (nq, w) = (qs[0], qs[1]);
        let nk = ks[0];
        let dh = w / heads;

        let mut q_soft = self.value(q).to_vec();
        for chunk in q_soft.chunks_mut(dh) {
            softmax_in_place(chunk);
        }
        let mut k_soft = self.value(k).to_vec();
        for chunk in k_soft.chunks_mut(dh) {
            softmax_in_place(chunk);
        }
        let vv = self.value(v);
        let guard = T::of(ATTENTION_DEN_GUARD);

        let mut kv = vec![T::zero(); heads * dh * dh];
        let mut ksum = vec![T::zero(); heads * dh];
        let mut out = vec![T::zero(); nq * w];
        let mut den = vec![T::zero(); nq * heads];
        let mut clamped = vec![false; nq * heads];
        for h in 0..heads {
            let o = h * dh;
            let kv_h = &mut kv[h * dh * dh..(h + 1) * dh * dh];
            // kv_h = k~_h^T v_h
            T::gemm(
                dh,
                nk,
                dh,
                &k_soft[o..],
                1,
                w as isize,
                &vv[o..],
                w as isize,
                1,
                T::zero(),
                kv_h,
                dh as isize,
                1,
            );
            let ks_h = &mut ksum[h * dh..(h + 1) * dh];
            for j in 0..nk {
                for (s, &x) in ks_h.iter_mut().zip(&k_soft[j * w + o..j * w + o + dh]) {
                    *s = *s + x;
                }
            }
            T::gemm(
                nq,
                dh,
                dh,
                &q_soft[o..],
                w as isize,
                1,
                kv_h,
                dh as isize,
                1,
                T::zero(),
                &mut out[o..],
                w as isize,
                1,
            );
            for i in 0..nq {
                let qrow = &q_soft[i * w + o..i * w + o + dh];
                let raw: T = qrow.iter().zip(ks_h.iter()).map(|(&a, &b)| a * b).sum();
                let d = if raw < guard {
                    clamped[i * heads + h] = true;
                    guard
                } else {
                    raw
                };
                den[i * heads + h] = d;
                let row = &mut out[i * w + o..i * w + o + dh];
                if nk == 1 && raw >= guard {
                    // One key: the normalized weight is exactly 1.
                    row.copy_from_slice(&vv[o..o + dh]);
                } else {
                    for x in row {
                        *x = *x / d;
                    }
                }
            }
        }
        let cache = AttnCache {
            heads,
            q_soft,
            k_soft,
            kv,
            ksum,
            den,
            clamped,
        };
        let ng = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            vec![nq, w],
            Op::LinearAttention(q, k, v, Box::new(cache)),
            ng,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients from a single-element `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(GitoError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if wants(*a) {
                    let ga = acc!(*a);
                    match kind {
                        Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + gi),
                        Binary::Mul => broadcast_accumulate(*bc, ga, g, bv, |gi, y| gi * y),
                        Binary::Div => broadcast_accumulate(*bc, ga, g, bv, |gi, y| gi / y),
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    match kind {
                        Binary::Add => broadcast_reduce(*bc, gb, g, av, bv, |gi, _, _| gi),
                        Binary::Sub => broadcast_reduce(*bc, gb, g, av, bv, |gi, _, _| -gi),
                        Binary::Mul => broadcast_reduce(*bc, gb, g, av, bv, |gi, x, _| gi * x),
                        Binary::Div => broadcast_reduce(*bc, gb, g, av, bv, |gi, x, y| -gi * x / (y * y)),
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc!(*a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x = *x + gi * *c;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = acc!(*a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x = *x + gi;
                }
            }
            Op::Sqrt(a) => {
                let ga = acc!(*a);
                let two = T::of(2.0);
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x = *x + gi / (two * y);
                }
            }
            Op::Gelu(a, cdf) => {
                let av = &nodes[a.0].value;
                let ga = acc!(*a);
                let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::of(0.5);
                for (((x, &gi), &xi), &c) in ga.iter_mut().zip(g).zip(av).zip(cdf) {
                    let pdf = (-half * xi * xi).exp() * inv_sqrt_2pi;
                    *x = *x + gi * (c + xi * pdf);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[a.0].value;
                let ga = acc!(*a);
                for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(av) {
                    *x = *x + if xi > T::zero() { gi } else { gi * *slope };
                }
            }
            Op::MatMul(a, b) => {
                let ash = &nodes[a.0].shape;
                let (m, k) = split_last(ash);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    let ga = acc!(*a);
                    // ga += g @ b^T
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        &nodes[b.0].value,
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    // gb += a^T @ g
                    T::gemm(
                        k,
                        m,
                        n,
                        &nodes[a.0].value,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total;
                let mut off = 0;
                for p in parts {
                    let w = *nodes[p.0].shape.last().unwrap();
                    if wants(*p) {
                        let gp = acc!(*p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] = gp[r * w + c] + g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast(a, start) => {
                let w = *nodes[a.0].shape.last().unwrap();
                let len = *node.shape.last().unwrap();
                let rows = node.value.len() / len;
                let ga = acc!(*a);
                for r in 0..rows {
                    for c in 0..len {
                        let i = r * w + start + c;
                        ga[i] = ga[i] + g[r * len + c];
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let sh = &node.shape;
                let outer: usize = sh[..*axis].iter().product();
                let len = sh[*axis];
                let inner: usize = sh[axis + 1..].iter().product();
                let y = &node.value;
                let ga = acc!(*a);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            let j = at(l);
                            ga[j] = ga[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let w = *node.shape.last().unwrap();
                let wf = T::of(w as f64);
                let y = &node.value;
                let ga = acc!(*a);
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let mg = gr.iter().copied().sum::<T>() / wf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / wf;
                    for c in 0..w {
                        let i = r * w + c;
                        ga[i] = ga[i] + is * (gr[c] - mg - yr[c] * mgy);
                    }
                }
            }
            Op::SegmentSoftmax(a, segs, n_seg) => {
                let h = node.shape[1];
                let y = &node.value;
                let mut dot = vec![T::zero(); n_seg * h];
                for (e, &s) in segs.iter().enumerate() {
                    for k in 0..h {
                        dot[s * h + k] = dot[s * h + k] + g[e * h + k] * y[e * h + k];
                    }
                }
                let ga = acc!(*a);
                for (e, &s) in segs.iter().enumerate() {
                    for k in 0..h {
                        let i = e * h + k;
                        ga[i] = ga[i] + y[i] * (g[i] - dot[s * h + k]);
                    }
                }
            }
            Op::Sum(a) => {
                let ga = acc!(*a);
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }
            Op::Mean(a) => {
                let ga = acc!(*a);
                let d = g[0] / T::of(ga.len() as f64);
                for x in ga.iter_mut() {
                    *x = *x + d;
                }
            }
            Op::SumRows(a) => {
                let w = g.len();
                let ga = acc!(*a);
                for (i, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[i % w];
                }
            }
            Op::SumLast(a) => {
                let w = *nodes[a.0].shape.last().unwrap();
                let ga = acc!(*a);
                for (i, x) in ga.iter_mut().enumerate() {
                    *x = *x + g[i / w];
                }
            }
            Op::Gather(a, idx) => {
                let w = node.shape[1];
                let ga = acc!(*a);
                for (e, &i) in idx.iter().enumerate() {
                    for c in 0..w {
                        ga[i * w + c] = ga[i * w + c] + g[e * w + c];
                    }
                }
            }
            Op::ScatterAdd(a, idx) => {
                let w = node.shape[1];
                let ga = acc!(*a);
                for (e, &i) in idx.iter().enumerate() {
                    for c in 0..w {
                        ga[e * w + c] = ga[e * w + c] + g[i * w + c];
                    }
                }
            }
            Op::LinearAttention(q, k, v, cache) => {
                self.backward_attention(node, g, *q, *k, *v, cache, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        node: &Node<T>,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        c: &AttnCache<T>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (nq, w) = (node.shape[0], node.shape[1]);
        let nk = nodes[k.0].shape[0];
        let heads = c.heads;
        let dh = w / heads;
        let out = &node.value;
        let vv = &nodes[v.0].value;

        let mut g_qs = vec![T::zero(); nq * w];
        let mut g_ks = vec![T::zero(); nk * w];
        let mut g_v = vec![T::zero(); nk * w];
        let mut g_num = vec![T::zero(); nq * w];
        let mut g_den = vec![T::zero(); nq];
        let mut g_kv = vec![T::zero(); dh * dh];
        let mut g_ksum = vec![T::zero(); dh];

        for h in 0..heads {
            let o = h * dh;
            for i in 0..nq {
                let d = c.den[i * heads + h];
                let row = i * w + o..i * w + o + dh;
                let mut dot = T::zero();
                for (gn, (&gi, &yi)) in g_num[row.clone()]
                    .iter_mut()
                    .zip(g[row.clone()].iter().zip(&out[row]))
                {
                    *gn = gi / d;
                    dot = dot + gi * yi;
                }
                g_den[i] = if c.clamped[i * heads + h] {
                    T::zero()
                } else {
                    -dot / d
                };
            }
            let kv_h = &c.kv[h * dh * dh..(h + 1) * dh * dh];
            let ks_h = &c.ksum[h * dh..(h + 1) * dh];
            // g_qs_h = g_num_h @ kv_h^T + g_den ksum^T
            T::gemm(
                nq,
                dh,
                dh,
                &g_num[o..],
                w as isize,
                1,
                kv_h,
                1,
                dh as isize,
                T::zero(),
                &mut g_qs[o..],
                w as isize,
                1,
            );
            for i in 0..nq {
                for a in 0..dh {
                    let j = i * w + o + a;
                    g_qs[j] = g_qs[j] + g_den[i] * ks_h[a];
                }
            }
            // g_kv = q~_h^T @ g_num_h
            T::gemm(
                dh,
                nq,
                dh,
                &c.q_soft[o..],
                1,
                w as isize,
                &g_num[o..],
                w as isize,
                1,
                T::zero(),
                &mut g_kv,
                dh as isize,
                1,
            );
            // g_ksum = q~_h^T g_den
            g_ksum.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..nq {
                for a in 0..dh {
                    g_ksum[a] = g_ksum[a] + c.q_soft[i * w + o + a] * g_den[i];
                }
            }
            // g_ks_h = v_h @ g_kv^T + 1 g_ksum^T
            T::gemm(
                nk,
                dh,
                dh,
                &vv[o..],
                w as isize,
                1,
                &g_kv,
                1,
                dh as isize,
                T::zero(),
                &mut g_ks[o..],
                w as isize,
                1,
            );
            for j in 0..nk {
                for a in 0..dh {
                    let t = j * w + o + a;
                    g_ks[t] = g_ks[t] + g_ksum[a];
                }
            }
            // g_v_h = k~_h @ g_kv
            T::gemm(
                nk,
                dh,
                dh,
                &c.k_soft[o..],
                w as isize,
                1,
                &g_kv,
                dh as isize,
                1,
                T::zero(),
                &mut g_v[o..],
                w as isize,
                1,
            );
        }

        let softmax_back = |soft: &[T], gs: &[T], dst: &mut Vec<T>| {
            for ((y, gy), d) in soft
                .chunks(dh)
                .zip(gs.chunks(dh))
                .zip(dst.chunks_mut(dh))
            {
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for ((di, &yi), &gi) in d.iter_mut().zip(y).zip(gy) {
                    *di = *di + yi * (gi - dot);
                }
            }
        };
        let mut accumulate = |var: Var, f: &dyn Fn(&mut Vec<T>)| {
            if nodes[var.0].needs_grad {
                let len = nodes[var.0].value.len();
                let buf = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(buf);
            }
        };
        accumulate(q, &|buf| softmax_back(&c.q_soft, &g_qs, buf));
        accumulate(k, &|buf| softmax_back(&c.k_soft, &g_ks, buf));
        accumulate(v, &|buf| {
            for (x, &d) in buf.iter_mut().zip(&g_v) {
                *x = *x + d;
            }
        });
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }

    /// Adds parameter gradients into the owning [`ParamSet`].
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                params.get_mut(id).accumulate_grad(g);
            }
        }
    }

    /// Sums parameter gradients into a flat buffer laid out like
    /// [`ParamSet::flat_grad`].
    pub fn accumulate_flat(&self, params: &ParamSet<T>, offsets: &[usize], flat: &mut [T]) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let off = offsets[id.index()];
                let n = params.get(id).numel();
                for (f, &x) in flat[off..off + n].iter_mut().zip(g) {
                    *f = *f + x;
                }
            }
        }
    }
}
