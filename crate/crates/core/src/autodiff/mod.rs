//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in creation order, which is always a valid topological
//! order, so the backward pass is a single reverse sweep. Gradients of a node
//! that fans out accumulate by addition. A tape is rebuilt for every training
//! step and is confined to one thread.

mod adam;
pub(crate) mod kernels;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use adam::Adam;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{gemm_nn, gemm_nt, gemm_tn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom node: receives the gradient of the node output
/// and a mask telling which inputs need a gradient, and returns one optional
/// gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Gelu,
    Softplus,
    Square,
    Softmax,
    LayerNorm,
    Concat,
    Reshape,
    Permute,
    Slice,
    Sum,
    Mean,
    Custom,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f32> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Square(..) => OpKind::Square,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Custom { .. } => OpKind::Custom,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, .. } | Op::Permute { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves that were reachable from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when `v` is not a leaf requiring grad or was
    /// not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

/// `small` broadcasts against `big` when it equals a suffix of `big`'s shape.
fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

const SQRT_2_INV: f32 = core::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * SQRT_2_INV))
}

fn gelu_grad(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * SQRT_2_INV)) + x * INV_SQRT_2PI * libm::expf(-0.5 * x * x)
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + libm::log1pf(libm::expf(-x.abs()))
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Inputs of the node that produced `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Every node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a[..., m, k] @ b[k, n]`, with `b` shared across the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb], ""));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matmul over matching leading axes: `a[..., m, k] @ b[..., k, n]`,
    /// or `a @ b^T` with `b[..., n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("bmm", &[sa, sb], "leading axes differ"));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(shape_err("bmm", &[sa, sb], "inner dimensions differ"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let (ab, bb) = (&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n]);
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return Err(shape_err(name, &[ta.shape(), tb.shape()], "rhs must match a suffix of lhs"));
        }
        let nb = tb.numel();
        let data = ta
            .data()
            .chunks(nb.max(1))
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Element-wise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softplus(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let Some(&n) = ta.shape().last() else {
            return Err(shape_err("softmax", &[ta.shape()], "needs rank >= 1"));
        };
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::expf(*v - max);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let ta = self.value(a);
        let Some(&n) = ta.shape().last() else {
            return Err(shape_err("layer_norm", &[ta.shape()], "needs rank >= 1"));
        };
        let rows = ta.numel() / n.max(1);
        let mut out = ta.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let r = 1.0 / libm::sqrtf(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LayerNorm { x: a, rstd }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first], "axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &[&first, s], "non-concat axes differ"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let run = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        let lead = s.first().copied().unwrap_or(1);
        let rest = self.value(a).numel() / lead.max(1);
        self.reshape(a, &[lead, rest])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let r = ta.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &[ta.shape(), perm], "not a permutation"));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| ta.shape()[p]).collect();
        let mut out = vec![0.0; ta.numel()];
        kernels::permute(ta.data(), ta.shape(), perm, &mut out);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                &[s],
                alloc::format!("axis {axis} range {start}..{}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x: a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total as f32), Op::Mean(a), rg)
    }

    /// Registers a node whose value was computed outside the tape and whose
    /// gradient is supplied by `backward`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Fails if `v` holds a NaN or infinity.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.into()))
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.numel() / k.max(1);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, tb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.rank();
                let (m, k) = (ta.shape()[r - 2], ta.shape()[r - 1]);
                let n = if *trans_b { tb.shape()[r - 2] } else { tb.shape()[r - 1] };
                let batch = ta.numel() / (m * k).max(1);
                if self.needs(*a) {
                    let mut da = vec![0.0; ta.numel()];
                    for bi in 0..batch {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let bb = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        let out = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gb, bb, out, m, n, k);
                        } else {
                            gemm_nt(gb, bb, out, m, n, k);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; tb.numel()];
                    for bi in 0..batch {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let ab = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gb, ab, out, m, n, k);
                        } else {
                            gemm_tn(ab, gb, out, m, k, n);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let tb = self.value(*b);
                    let db = reduce_to_suffix(gd, tb.numel(), |x, _| sign * x, None);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel().max(1);
                if self.needs(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| x * tb.data()[j % nb])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let db = reduce_to_suffix(gd, tb.numel(), |x, y| x * y, Some(ta.data()));
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&g, &x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let s: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for (r, ((dr, yr), gr)) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)).enumerate() {
                    let mg = gr.iter().sum::<f32>() / n as f32;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f32>() / n as f32;
                    for j in 0..n {
                        dr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let tv = self.value(v);
                    let run = tv.shape()[*axis] * inner;
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(tv.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + run]);
                        }
                        self.accumulate(grads, v, Tensor::new(tv.shape().to_vec(), d)?);
                    }
                    offset += run;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape)?);
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let mut d = vec![0.0; g.numel()];
                kernels::permute(gd, g.shape(), &inv, &mut d);
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d)?);
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let s = tx.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), d)?);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(ta.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = gd[0] / ta.numel().max(1) as f32;
                self.accumulate(grads, *a, Tensor::full(ta.shape(), v));
            }
            Op::Custom { inputs, backward } => {
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let out = backward(g, &needs)?;
                if out.len() != inputs.len() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "custom backward for node {i} returned {} gradients for {} inputs",
                        out.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(out) {
                    let Some(d) = d else { continue };
                    let expected = self.value(v).shape();
                    if d.shape() != expected {
                        return Err(Error::CustomGradShape {
                            node: i,
                            got: d.shape().to_vec(),
                            expected: expected.to_vec(),
                        });
                    }
                    self.accumulate(grads, v, d);
                }
            }
        }
        Ok(())
    }
}

/// Sums `g` over its leading axes down to the trailing `n` entries.
fn reduce_to_suffix(g: &[f32], n: usize, f: impl Fn(f32, f32) -> f32, other: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0; n];
    if n == 0 {
        return out;
    }
    for (c, chunk) in g.chunks(n).enumerate() {
        for (j, &x) in chunk.iter().enumerate() {
            let y = other.map_or(0.0, |o| o[c * n + j]);
            out[j] += f(x, y);
        }
    }
    out
}
