use std::collections::HashMap;

use super::kernels::{self, AttnGeom, ConvGeom};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution forward strategy. Both produce the same values; backward always
/// uses the direct loops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    #[default]
    Direct,
    Im2col,
}

/// Discriminant of a recorded op, for structural assertions on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Neg,
    Exp,
    Cos,
    Sin,
    Softplus,
    Sqrt,
    Relu,
    Square,
    Sum,
    SumAxis,
    MeanAxis,
    MaxAxis,
    Reshape,
    Permute,
    Concat,
    Matmul,
    Softmax,
    LogSoftmax,
    LayerNorm,
    L2Normalize,
    Conv2d,
    Attention,
    GatherRows,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Cos(Var),
    Sin(Var),
    Softplus(Var),
    Sqrt(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Matmul(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, usize, Vec<f64>),
    L2Normalize(Var, usize, Vec<f64>),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        scale: f64,
        lse: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Neg(..) => OpKind::Neg,
            Op::Exp(..) => OpKind::Exp,
            Op::Cos(..) => OpKind::Cos,
            Op::Sin(..) => OpKind::Sin,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Relu(..) => OpKind::Relu,
            Op::Square(..) => OpKind::Square,
            Op::Sum(..) => OpKind::Sum,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::MaxAxis(..) => OpKind::MaxAxis,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Concat(..) => OpKind::Concat,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Attention { .. } => OpKind::Attention,
            Op::GatherRows(..) => OpKind::GatherRows,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_FLOOR: f64 = 1e-12;

/// Ordered record of executed ops. Nodes are appended as ops run, so every
/// op's inputs precede it and a reverse sweep is a valid backward order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    conv_algo: ConvAlgo,
    bound: HashMap<usize, Var>,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    (out_shape, src_strides)
}

/// For each linear index of the permuted tensor, the source linear index.
fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let (out_shape, src_strides) = permuted_strides(shape, perm);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    map
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_conv_algo(algo: ConvAlgo) -> Self {
        Graph {
            conv_algo: algo,
            ..Graph::default()
        }
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a learnable leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.op_kinds().filter(|k| *k == kind).count()
    }

    /// Learnable leaves in recording order.
    pub fn learnable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.value.requires_grad())
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, needs_grad)
    }

    /// Records a leaf; it is learnable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a learnable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        copy.set_requires_grad(true);
        self.leaf(copy)
    }

    /// Registers a long-lived tensor (typically a model parameter) once per
    /// graph: repeated calls with the same tensor return the same node.
    /// Learnable iff `t.requires_grad()`. Identity is the tensor's address, so
    /// a hit is only reused while shape and contents still match; a different
    /// tensor that reuses a dropped one's address gets a fresh node.
    pub fn bind(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.bound.get(&key) {
            let old = self.value(v);
            if old.shape() == t.shape() && old.data() == t.data() {
                return v;
            }
        }
        let v = if t.requires_grad() {
            self.param(t)
        } else {
            self.constant(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor"))
        };
        self.bound.insert(key, v);
        v
    }

    /// Node previously created by [`Graph::bind`] for `t`.
    pub fn bound_var(&self, t: &Tensor) -> Option<Var> {
        self.bound.get(&(t as *const Tensor as usize)).copied()
    }

    pub fn bound_count(&self) -> usize {
        self.bound.len()
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("right operand {:?} is not a trailing suffix of {:?}", sb, sa),
            ))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let data: Vec<f64> = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.make(shape, data, op, needs)
    }

    /// `a + b`, with `b` broadcast along the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("div", a, b)?;
        Ok(self.binary(a, b, |x, y| x / y, Op::Div(a, b)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.make(shape, data, op, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.make(Vec::new(), vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis < self.shape(x).len() {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("axis {} out of range for {:?}", axis, self.shape(x)),
            ))
        }
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        s
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let shape = self.reduced_shape(x, axis);
        let needs = self.needs(x);
        Ok(self.make(shape, out, Op::SumAxis(x, axis), needs))
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_mean", x, axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        let node = &mut self.nodes[s.0];
        node.value.data_mut().iter_mut().for_each(|v| *v /= n);
        node.op = match node.op {
            Op::SumAxis(x, a) => Op::MeanAxis(x, a),
            _ => unreachable!(),
        };
        Ok(s)
    }

    /// Max over `axis`; ties resolve to the lowest index.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_max", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = src[(o * n + j) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = j;
                    }
                }
            }
        }
        let shape = self.reduced_shape(x, axis);
        let needs = self.needs(x);
        Ok(self.make(shape, out, Op::MaxAxis(x, axis, arg), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.make(shape.to_vec(), data, Op::Reshape(x), needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of {} axes", perm, shape.len()),
            ));
        }
        let map = permute_index_map(&shape, perm);
        let src = self.data(x);
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(x);
        Ok(self.make(out_shape, data, Op::Permute(x, perm.to_vec()), needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", s, base, axis),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.data(x)[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.make(shape, out, Op::Concat(xs.to_vec(), axis), needs))
    }

    /// `[m,k] × [k,n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.make(vec![m, n], out, Op::Matmul(a, b), needs))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.make(shape, out, Op::Softmax(x, axis), needs))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (out[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] -= lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.make(shape, out, Op::LogSoftmax(x, axis), needs))
    }

    /// Zero-mean, unit-variance normalization along `axis`
    /// (population variance, [`LAYER_NORM_EPS`] in the denominator).
    pub fn layer_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("layer_normalize", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.data(x).to_vec();
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| out[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (out[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..n {
                    out[idx(j)] = (out[idx(j)] - mean) * r;
                }
                inv_std[o * inner + i] = r;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.make(shape, out, Op::LayerNorm(x, axis, inv_std), needs))
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.data(x).to_vec();
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| out[idx(j)].powi(2)).sum::<f64>().sqrt().max(L2_FLOOR);
                for j in 0..n {
                    out[idx(j)] /= norm;
                }
                norms[o * inner + i] = norm;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.make(shape, out, Op::L2Normalize(x, axis, norms), needs))
    }

    /// NCHW cross-correlation with a square `[outC, inC, k, k]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}; expected NCHW and [O,C,k,k]", si, sk),
            ));
        }
        if si[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", si[1], sk[1]),
            ));
        }
        let k = sk[2];
        if stride == 0 || k > si[2] + 2 * padding || k > si[3] + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} stride {} padding {} on {}x{}", k, stride, padding, si[2], si[3]),
            ));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_c: si[1],
            h: si[2],
            w: si[3],
            out_c: sk[0],
            k,
            stride,
            pad: padding,
        };
        let out = match self.conv_algo {
            ConvAlgo::Direct => kernels::conv2d_direct(self.data(input), self.data(kernel), &geom),
            ConvAlgo::Im2col => kernels::conv2d_im2col(self.data(input), self.data(kernel), &geom),
        };
        let shape = vec![geom.batch, geom.out_c, geom.out_h(), geom.out_w()];
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.make(shape, out, Op::Conv2d { input, kernel, geom }, needs))
    }

    /// Fused single-head attention `softmax(q kᵀ / √d) v` over `[B, T, d]`
    /// inputs. Probabilities are recomputed in backward from the saved
    /// per-row log-sum-exp.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", s, self.shape(k), self.shape(v)),
            ));
        }
        let geom = AttnGeom {
            batch: s[0],
            tokens: s[1],
            dim: s[2],
        };
        let scale = 1.0 / (geom.dim as f64).sqrt();
        let (out, lse) = kernels::attention_forward(self.data(q), self.data(k), self.data(v), &geom, scale);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.make(s, out, Op::Attention { q, k, v, geom, scale, lse }, needs))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("rows {:?} of {:?}", rows, s)));
        }
        let d = s[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..][..d]);
        }
        let needs = self.needs(x);
        Ok(self.make(vec![rows.len(), d], out, Op::GatherRows(x, rows.to_vec()), needs))
    }

    /// Reverse sweep from a scalar `loss`. Every learnable leaf has
    /// dLoss/dLeaf added to its stored gradient; leaves off the loss path
    /// receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if self.data(loss).len() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, g, &mut grads);
        }
        for (idx, slot) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = slot.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let reduce_to = |len: usize, g: &[f64], f: &dyn Fn(usize) -> f64| {
            let mut out = vec![0.0; len];
            for (i, gi) in g.iter().enumerate() {
                out[i % len] += gi * f(i);
            }
            out
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*b) {
                    let gb = reduce_to(self.data(*b).len(), &g, &|_| sign);
                    accumulate(grads, *b, gb);
                }
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if needs(*b) {
                    let gb = reduce_to(nb, &g, &|i| da[i]);
                    accumulate(grads, *b, gb);
                }
                if needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * db[i % nb]).collect();
                    accumulate(grads, *a, ga);
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if needs(*b) {
                    let gb = reduce_to(nb, &g, &|i| -da[i] / (db[i % nb] * db[i % nb]));
                    accumulate(grads, *b, gb);
                }
                if needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi / db[i % nb]).collect();
                    accumulate(grads, *a, ga);
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => accumulate(grads, *x, g),
            Op::Neg(x) => accumulate(grads, *x, g.iter().map(|v| -v).collect()),
            Op::Exp(x) => accumulate(grads, *x, g.iter().zip(y).map(|(a, b)| a * b).collect()),
            Op::Cos(x) => {
                let dx = self.data(*x);
                accumulate(grads, *x, g.iter().zip(dx).map(|(a, v)| -a * v.sin()).collect())
            }
            Op::Sin(x) => {
                let dx = self.data(*x);
                accumulate(grads, *x, g.iter().zip(dx).map(|(a, v)| a * v.cos()).collect())
            }
            Op::Softplus(x) => {
                let dx = self.data(*x);
                accumulate(grads, *x, g.iter().zip(dx).map(|(a, v)| a * sigmoid(*v)).collect())
            }
            Op::Sqrt(x) => accumulate(grads, *x, g.iter().zip(y).map(|(a, r)| a * 0.5 / r).collect()),
            Op::Relu(x) => {
                let dx = self.data(*x);
                accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(dx)
                        .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                        .collect(),
                )
            }
            Op::Square(x) => {
                let dx = self.data(*x);
                accumulate(grads, *x, g.iter().zip(dx).map(|(a, v)| 2.0 * a * v).collect())
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let f = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i] * f;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxAxis(x, axis, arg) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        gx[(o * n + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Permute(x, perm) => {
                let map = permute_index_map(self.shape(*x), perm);
                let mut gx = vec![0.0; g.len()];
                for (o, &src) in map.iter().enumerate() {
                    gx[src] = g[o];
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if needs(x) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            gx.extend_from_slice(&g[(o * total + offset) * inner..][..n * inner]);
                        }
                        accumulate(grads, x, gx);
                    }
                    offset += n;
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let bt = transpose(self.data(*b), k, n);
                    accumulate(grads, *a, matmul_raw(&g, &bt, m, n, k));
                }
                if needs(*b) {
                    let at = transpose(self.data(*a), m, k);
                    accumulate(grads, *b, matmul_raw(&at, &g, k, m, n));
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm(x, axis, inv_std) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; g.len()];
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mg = (0..n).map(|j| g[idx(j)]).sum::<f64>() / nf;
                        let mgy = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum::<f64>() / nf;
                        let r = inv_std[o * inner + i];
                        for j in 0..n {
                            gx[idx(j)] = r * (g[idx(j)] - mg - y[idx(j)] * mgy);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Normalize(x, axis, norms) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        let norm = norms[o * inner + i];
                        for j in 0..n {
                            gx[idx(j)] = (g[idx(j)] - y[idx(j)] * dot) / norm;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*kernel),
                    &g,
                    geom,
                    needs(*input),
                    needs(*kernel),
                );
                if needs(*input) {
                    accumulate(grads, *input, gi);
                }
                if needs(*kernel) {
                    accumulate(grads, *kernel, gk);
                }
            }
            Op::Attention { q, k, v, geom, scale, lse } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    y,
                    lse,
                    &g,
                    geom,
                    *scale,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        accumulate(grads, var, grad);
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let d = self.shape(*x)[1];
                let mut gx = vec![0.0; self.data(*x).len()];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += g[r * d + c];
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    // ln(eʸ − 1) = y + ln(1 − e⁻ʸ)
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn scale_by_one_is_bitwise_identity() {
        let mut g = Graph::new();
        let vals = [0.1, -3.7, 1e-300, f64::MAX / 2.0];
        let a = g.constant(t(&[4], &vals));
        let b = g.scale(a, 1.0);
        for (x, y) in g.data(a).iter().zip(g.data(b)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn mul_backward_is_other_operand() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let b = g.constant(t(&[3], &[5.0, -1.0, 0.5]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, -1.0, 0.5]);
    }

    #[test]
    fn broadcasting_rejects_non_suffix() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        let s = g.constant(Tensor::scalar(1.5));
        let c = g.mul(a, s).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_disconnected_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let unused = g.leaf(t(&[3], &[1.0, 1.0, 1.0]).with_grad());
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(z, 0).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big, 0).unwrap();
        assert_eq!(g.data(s)[0], 1.0);
        assert!(g.data(s)[1] >= 0.0 && g.data(s)[1] < 1e-300);
    }

    #[test]
    fn concat_channel_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::full(&[1, 3, 4, 4], 1.0));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 4, 4]);
        assert_eq!(g.data(c)[2 * 16 - 1], 0.0);
        assert_eq!(g.data(c)[2 * 16], 1.0);
        let bad = g.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::new();
        // eps biases the variance by eps/var, so use slices with var ≫ 10.
        let x = g.constant(Tensor::from_fn(&[3, 7], |i| ((i * 17) % 5) as f64 * 13.0 + 4.0 * i as f64));
        let y = g.layer_normalize(x, 1).unwrap();
        for row in g.data(y).chunks(7) {
            let mean: f64 = row.iter().sum::<f64>() / 7.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let a = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let p = g.matmul(eye, a).unwrap();
        assert_eq!(g.data(p), g.data(a));
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 5, 6], |i| (i as f64).sin()));
        let k = g.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| if i == 12 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, k, 1, 2).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element (b=1, c=2, w=3) moves to (3, 1, 2)
        assert_eq!(g.data(p)[(3 * 2 + 1) * 3 + 2], (12 + 2 * 4 + 3) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn reduce_max_ties_pick_first() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 5.0, 5.0, -1.0, -2.0, -3.0]).with_grad());
        let m = g.reduce_max(x, 1).unwrap();
        assert_eq!(g.data(m), &[5.0, -1.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softplus_inverse() {
        for y in [1e-3, 0.5, 1.0, 3.5, 17.5, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
