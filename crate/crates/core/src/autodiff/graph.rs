//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in order. Node indices are
//! a topological order, so backward is a single reverse sweep over the tape.
//! Reductions (`sum`, `max`) keep the reduced axis with extent 1.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::{axis_split, strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitive set.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    MatMul,
    /// Broadcasting elementwise ops.
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    /// Forward only; contributes a zero gradient.
    Floor,
    Square,
    Reciprocal,
    Sum(usize),
    Max(usize),
    Softmax(usize),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reverse(usize),
    /// Row gather along axis 0.
    Gather(Vec<usize>),
    Reshape(Vec<usize>),
    /// Swaps the last two axes.
    Transpose,
    /// Inverted dropout; the mask is drawn from a stream seeded by `seed`.
    Dropout {
        rate: f64,
        training: bool,
        seed: u64,
    },
    /// Per-row negative log-likelihood of `targets` under softmax(logits), shape `[n]`.
    CrossEntropy(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar-mul",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu(_) => "leaky-relu",
            Primitive::Floor => "floor",
            Primitive::Square => "square",
            Primitive::Reciprocal => "reciprocal",
            Primitive::Sum(_) => "sum",
            Primitive::Max(_) => "max",
            Primitive::Softmax(_) => "softmax",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reverse(_) => "reverse",
            Primitive::Gather(_) => "gather",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Dropout { .. } => "dropout",
            Primitive::CrossEntropy(_) => "cross-entropy",
        }
    }
}

enum Saved<T> {
    None,
    Indices(Vec<usize>),
    Buffer(Vec<T>),
}

enum NodeKind<T> {
    Leaf,
    Param,
    Op {
        prim: Primitive,
        inputs: Vec<Var>,
        saved: Saved<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    kind: NodeKind<T>,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    tracking: bool,
    consumed: bool,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for backward.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            tracking: true,
            consumed: false,
            params: HashMap::new(),
        }
    }

    /// A graph that only evaluates; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Graph {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Used by inference
    /// loops to discard per-step intermediates.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    /// Drops every recorded node and re-arms the tape.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, NodeKind::Leaf)
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        Ok(self.constant(Tensor::from_f64(shape, data)?))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(T::lit(x)))
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value().clone(), NodeKind::Param);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, kind: NodeKind<T>) -> Var {
        let kind = if self.tracking {
            kind
        } else {
            match kind {
                NodeKind::Op { .. } => NodeKind::Leaf,
                k => k,
            }
        };
        self.nodes.push(Node { value, kind });
        Var(self.nodes.len() - 1)
    }

    /// Applies one primitive and records it on the tape.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        let arity_ok = match &prim {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => inputs.len() == 2,
            Primitive::Concat(_) => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::contract(format!(
                "{} called with {} inputs",
                prim.name(),
                inputs.len()
            )));
        }
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, saved) = forward(&prim, &vals)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        Ok(self.push(
            out,
            NodeKind::Op {
                prim,
                inputs: inputs.to_vec(),
                saved,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every node.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.tracking {
            return Err(Error::State("backward on a graph without gradient tracking".into()));
        }
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let NodeKind::Op { prim, inputs, saved } = &self.nodes[i].kind {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let in_grads = backward(prim, &vals, &self.nodes[i].value, saved, &g);
                for (input, ig) in inputs.iter().zip(in_grads) {
                    let Some(ig) = ig else { continue };
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                        slot => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Accumulates d(loss)/d(param) into every parameter reachable from `loss`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(c), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(Primitive::LeakyRelu(slope), &[a])
    }
    pub fn floor(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Floor, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Reciprocal, &[a])
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum(axis), &[a])
    }
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Max(axis), &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax(axis), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn reverse(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Reverse(axis), &[a])
    }
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather(indices), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::CrossEntropy(targets), &[logits])
    }

    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        let seed = rng.next_u64();
        self.apply(Primitive::Dropout { rate, training, seed }, &[a])
    }

    /// Sum over every element, as a one-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Elementwise minimum of two same-shaped tensors, via `-max(-a, -b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.scale(a, -1.0)?;
        let nb = self.scale(b, -1.0)?;
        let m = self.maximum(na, nb)?;
        self.scale(m, -1.0)
    }

    /// Elementwise maximum of two same-shaped tensors.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) {
            return Err(Error::Shape {
                op: "max",
                lhs: shape,
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut stacked_shape = vec![1];
        stacked_shape.extend_from_slice(&shape);
        let a1 = self.reshape(a, &stacked_shape)?;
        let b1 = self.reshape(b, &stacked_shape)?;
        let both = self.concat(&[a1, b1], 0)?;
        let m = self.max(both, 0)?;
        self.reshape(m, &shape)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed in the index space of `out`; broadcast axes get 0.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output index of a broadcast, with the matching input offsets.
fn broadcast_for_each(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut ba, mut bb) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * last;
        for j in 0..last {
            f(base + j, ba + j * la, bb + j * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ba -= sa[d] * out[d];
            bb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1])),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2])),
        _ => Err(shape_err("matmul", a, b)),
    }
}

fn forward<T: Scalar>(prim: &Primitive, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let none = Saved::None;
    let out = match prim {
        Primitive::MatMul => {
            let (batch, m, k, n) = matmul_dims(x[0].shape(), x[1].shape())?;
            let (a, b) = (x[0].data(), x[1].data());
            let mut c = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &b[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut c[bi * m * n..(bi + 1) * m * n],
                );
            }
            let shape = if x[0].rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
            Tensor::from_parts(shape, c)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            let out_shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| shape_err(prim.name(), a.shape(), b.shape()))?;
            let n: usize = out_shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<T> = if a.shape() == b.shape() {
                match prim {
                    Primitive::Add => ad.iter().zip(bd).map(|(&p, &q)| p + q).collect(),
                    Primitive::Sub => ad.iter().zip(bd).map(|(&p, &q)| p - q).collect(),
                    _ => ad.iter().zip(bd).map(|(&p, &q)| p * q).collect(),
                }
            } else {
                let sa = aligned_strides(a.shape(), &out_shape);
                let sb = aligned_strides(b.shape(), &out_shape);
                let mut out = vec![T::zero(); n];
                match prim {
                    Primitive::Add => broadcast_for_each(&out_shape, &sa, &sb, |o, i, j| out[o] = ad[i] + bd[j]),
                    Primitive::Sub => broadcast_for_each(&out_shape, &sa, &sb, |o, i, j| out[o] = ad[i] - bd[j]),
                    _ => broadcast_for_each(&out_shape, &sa, &sb, |o, i, j| out[o] = ad[i] * bd[j]),
                }
                out
            };
            Tensor::from_parts(out_shape, data)
        }
        Primitive::ScalarMul(c) => {
            let c = T::lit(*c);
            map(x[0], |v| v * c)
        }
        Primitive::Exp => map(x[0], |v| v.exp()),
        Primitive::Log => map(x[0], |v| v.ln()),
        Primitive::Sigmoid => map(x[0], sigmoid),
        Primitive::Tanh => map(x[0], |v| v.tanh()),
        Primitive::Relu => map(x[0], |v| if v > T::zero() { v } else { T::zero() }),
        Primitive::LeakyRelu(slope) => {
            let s = T::lit(*slope);
            map(x[0], |v| if v > T::zero() { v } else { v * s })
        }
        Primitive::Floor => map(x[0], |v| v.floor()),
        Primitive::Square => map(x[0], |v| v * v),
        Primitive::Reciprocal => map(x[0], |v| T::one() / v),
        Primitive::Sum(axis) | Primitive::Max(axis) | Primitive::Softmax(axis) => {
            let shape = x[0].shape();
            if *axis >= shape.len() {
                return Err(shape_err(prim.name(), shape, &[*axis]));
            }
            let (outer, dim, inner) = axis_split(shape, *axis);
            let d = x[0].data();
            match prim {
                Primitive::Sum(_) => {
                    let mut out = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for k in 0..dim {
                            let row = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    let mut out_shape = shape.to_vec();
                    out_shape[*axis] = 1;
                    Tensor::from_parts(out_shape, out)
                }
                Primitive::Max(_) => {
                    let mut out = vec![T::zero(); outer * inner];
                    let mut arg = vec![0usize; outer * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = 0;
                            let mut bv = d[o * dim * inner + i];
                            for k in 1..dim {
                                let v = d[(o * dim + k) * inner + i];
                                if v > bv {
                                    bv = v;
                                    best = k;
                                }
                            }
                            out[o * inner + i] = bv;
                            arg[o * inner + i] = best;
                        }
                    }
                    let mut out_shape = shape.to_vec();
                    out_shape[*axis] = 1;
                    return Ok((Tensor::from_parts(out_shape, out), Saved::Indices(arg)));
                }
                _ => {
                    let mut out = vec![T::zero(); d.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * dim + k) * inner + i;
                            let mut mx = d[at(0)];
                            for k in 1..dim {
                                mx = mx.max(d[at(k)]);
                            }
                            let mut z = T::zero();
                            for k in 0..dim {
                                let e = (d[at(k)] - mx).exp();
                                out[at(k)] = e;
                                z += e;
                            }
                            for k in 0..dim {
                                out[at(k)] = out[at(k)] / z;
                            }
                        }
                    }
                    Tensor::from_parts(shape.to_vec(), out)
                }
            }
        }
        Primitive::Concat(axis) => {
            let first = x[0].shape();
            if *axis >= first.len() {
                return Err(shape_err("concat", first, &[*axis]));
            }
            for t in &x[1..] {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (p, q))| i == *axis || p == q);
                if !compatible {
                    return Err(shape_err("concat", first, s));
                }
            }
            let (outer, _, inner) = axis_split(first, *axis);
            let total: usize = x.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let w = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, out)
        }
        Primitive::Slice { axis, start, len } => {
            let shape = x[0].shape();
            if *axis >= shape.len() || *len == 0 || start + len > shape[*axis] {
                return Err(shape_err("slice", shape, &[*axis, *start, *len]));
            }
            let (outer, dim, inner) = axis_split(shape, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x[0].data()[base..base + len * inner]);
            }
            let mut s = shape.to_vec();
            s[*axis] = *len;
            Tensor::from_parts(s, out)
        }
        Primitive::Reverse(axis) => {
            let shape = x[0].shape();
            if *axis >= shape.len() {
                return Err(shape_err("reverse", shape, &[*axis]));
            }
            Tensor::from_parts(shape.to_vec(), reverse_axis(x[0].data(), shape, *axis))
        }
        Primitive::Gather(indices) => {
            let shape = x[0].shape();
            let rows = shape[0];
            if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
                return Err(Error::contract(format!(
                    "gather indices out of range for {rows} rows"
                )));
            }
            let inner = x[0].numel() / rows;
            let mut out = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                out.extend_from_slice(&x[0].data()[i * inner..(i + 1) * inner]);
            }
            let mut s = shape.to_vec();
            s[0] = indices.len();
            Tensor::from_parts(s, out)
        }
        Primitive::Reshape(shape) => x[0].reshape(shape)?,
        Primitive::Transpose => {
            let shape = x[0].shape();
            let r = shape.len();
            if r < 2 {
                return Err(shape_err("transpose", shape, &[]));
            }
            let (m, n) = (shape[r - 2], shape[r - 1]);
            let batch = x[0].numel() / (m * n);
            let mut out = vec![T::zero(); x[0].numel()];
            let d = x[0].data();
            for b in 0..batch {
                for i in 0..m {
                    for j in 0..n {
                        out[b * m * n + j * m + i] = d[b * m * n + i * n + j];
                    }
                }
            }
            let mut s = shape.to_vec();
            s.swap(r - 2, r - 1);
            Tensor::from_parts(s, out)
        }
        Primitive::Dropout { rate, training, seed } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
            }
            if !*training || *rate == 0.0 {
                return Ok((x[0].clone(), none));
            }
            let mut rng = RngStream::new(*seed);
            let keep = T::lit(1.0 / (1.0 - rate));
            let mask: Vec<T> = (0..x[0].numel())
                .map(|_| if rng.uniform() >= *rate { keep } else { T::zero() })
                .collect();
            let data = x[0].data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            return Ok((Tensor::from_parts(x[0].shape().to_vec(), data), Saved::Buffer(mask)));
        }
        Primitive::CrossEntropy(targets) => {
            let shape = x[0].shape();
            if shape.len() != 2 || shape[0] != targets.len() {
                return Err(shape_err("cross-entropy", shape, &[targets.len()]));
            }
            let (n, v) = (shape[0], shape[1]);
            if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
                return Err(Error::contract(format!("cross-entropy target {bad} >= {v} classes")));
            }
            let d = x[0].data();
            let mut probs = vec![T::zero(); n * v];
            let mut losses = Vec::with_capacity(n);
            for i in 0..n {
                let row = &d[i * v..(i + 1) * v];
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for (p, &l) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                    *p = (l - mx).exp();
                    z += *p;
                }
                for p in &mut probs[i * v..(i + 1) * v] {
                    *p = *p / z;
                }
                losses.push(z.ln() + mx - row[targets[i]]);
            }
            return Ok((Tensor::from_parts(vec![n], losses), Saved::Buffer(probs)));
        }
    };
    Ok((out, none))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn reverse_axis<T: Scalar>(d: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, dim, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(d.len());
    for o in 0..outer {
        for k in (0..dim).rev() {
            let base = (o * dim + k) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
    }
    out
}

/// Vector-Jacobian products. Returns one optional gradient per input.
fn backward<T: Scalar>(
    prim: &Primitive,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    saved: &Saved<T>,
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let unary = |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> { vec![Some((0..g.len()).map(f).collect())] };
    let xd = x[0].data();
    let yd = y.data();
    match prim {
        Primitive::MatMul => {
            let (batch, m, k, n) = matmul_dims(x[0].shape(), x[1].shape()).expect("checked in forward");
            let (a, b) = (x[0].data(), x[1].data());
            let mut ga = vec![T::zero(); batch * m * k];
            let mut gb = vec![T::zero(); batch * k * n];
            for bi in 0..batch {
                let gc = &g[bi * m * n..(bi + 1) * m * n];
                let ab = &a[bi * m * k..(bi + 1) * m * k];
                let bb = &b[bi * k * n..(bi + 1) * k * n];
                // dA = dC * B^T
                T::gemm(m, n, k, gc, (n as isize, 1), bb, (1, n as isize), T::zero(), &mut ga[bi * m * k..(bi + 1) * m * k]);
                // dB = A^T * dC
                T::gemm(k, m, n, ab, (1, k as isize), gc, (n as isize, 1), T::zero(), &mut gb[bi * k * n..(bi + 1) * k * n]);
            }
            vec![Some(ga), Some(gb)]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            let out_shape = y.shape();
            let mut ga = vec![T::zero(); a.numel()];
            let mut gb = vec![T::zero(); b.numel()];
            let sa = aligned_strides(a.shape(), out_shape);
            let sb = aligned_strides(b.shape(), out_shape);
            let (ad, bd) = (a.data(), b.data());
            match prim {
                Primitive::Add => broadcast_for_each(out_shape, &sa, &sb, |o, i, j| {
                    ga[i] += g[o];
                    gb[j] += g[o];
                }),
                Primitive::Sub => broadcast_for_each(out_shape, &sa, &sb, |o, i, j| {
                    ga[i] += g[o];
                    gb[j] -= g[o];
                }),
                _ => broadcast_for_each(out_shape, &sa, &sb, |o, i, j| {
                    ga[i] += g[o] * bd[j];
                    gb[j] += g[o] * ad[i];
                }),
            }
            vec![Some(ga), Some(gb)]
        }
        Primitive::ScalarMul(c) => {
            let c = T::lit(*c);
            unary(&|i| g[i] * c)
        }
        Primitive::Exp => unary(&|i| g[i] * yd[i]),
        Primitive::Log => unary(&|i| g[i] / xd[i]),
        Primitive::Sigmoid => unary(&|i| g[i] * yd[i] * (T::one() - yd[i])),
        Primitive::Tanh => unary(&|i| g[i] * (T::one() - yd[i] * yd[i])),
        Primitive::Relu => unary(&|i| if xd[i] > T::zero() { g[i] } else { T::zero() }),
        Primitive::LeakyRelu(slope) => {
            let s = T::lit(*slope);
            unary(&|i| if xd[i] > T::zero() { g[i] } else { g[i] * s })
        }
        Primitive::Floor => vec![None],
        Primitive::Square => unary(&|i| g[i] * T::lit(2.0) * xd[i]),
        Primitive::Reciprocal => unary(&|i| -g[i] * yd[i] * yd[i]),
        Primitive::Sum(axis) => {
            let (outer, dim, inner) = axis_split(x[0].shape(), *axis);
            let mut gx = Vec::with_capacity(x[0].numel());
            for o in 0..outer {
                for _ in 0..dim {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Primitive::Max(axis) => {
            let Saved::Indices(arg) = saved else { unreachable!("max saves indices") };
            let (outer, dim, inner) = axis_split(x[0].shape(), *axis);
            let mut gx = vec![T::zero(); x[0].numel()];
            for o in 0..outer {
                for i in 0..inner {
                    gx[(o * dim + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(gx)]
        }
        Primitive::Softmax(axis) => {
            let (outer, dim, inner) = axis_split(x[0].shape(), *axis);
            let mut gx = vec![T::zero(); x[0].numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * dim + k) * inner + i;
                    let dot: T = (0..dim).map(|k| g[at(k)] * yd[at(k)]).sum();
                    for k in 0..dim {
                        gx[at(k)] = yd[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::Concat(axis) => {
            let (outer, _, inner) = axis_split(x[0].shape(), *axis);
            let total = y.shape()[*axis];
            let mut grads: Vec<Vec<T>> = x.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (t, gt) in x.iter().zip(grads.iter_mut()) {
                    let w = t.shape()[*axis] * inner;
                    gt.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }
        Primitive::Slice { axis, start, len } => {
            let (outer, dim, inner) = axis_split(x[0].shape(), *axis);
            let mut gx = vec![T::zero(); x[0].numel()];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Primitive::Reverse(axis) => vec![Some(reverse_axis(g, x[0].shape(), *axis))],
        Primitive::Gather(indices) => {
            let inner = x[0].numel() / x[0].shape()[0];
            let mut gx = vec![T::zero(); x[0].numel()];
            for (r, &i) in indices.iter().enumerate() {
                for (acc, &v) in gx[i * inner..(i + 1) * inner].iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                    *acc += v;
                }
            }
            vec![Some(gx)]
        }
        Primitive::Reshape(_) => vec![Some(g.to_vec())],
        Primitive::Transpose => {
            let shape = y.shape();
            let r = shape.len();
            let (m, n) = (shape[r - 2], shape[r - 1]);
            let batch = g.len() / (m * n);
            let mut gx = vec![T::zero(); g.len()];
            for b in 0..batch {
                for i in 0..m {
                    for j in 0..n {
                        gx[b * m * n + j * m + i] = g[b * m * n + i * n + j];
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::Dropout { .. } => match saved {
            Saved::Buffer(mask) => unary(&|i| g[i] * mask[i]),
            _ => vec![Some(g.to_vec())],
        },
        Primitive::CrossEntropy(targets) => {
            let Saved::Buffer(probs) = saved else { unreachable!("cross-entropy saves probabilities") };
            let v = x[0].shape()[1];
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * v + t] -= T::one();
                for p in &mut gx[i * v..(i + 1) * v] {
                    *p *= g[i];
                }
            }
            vec![Some(gx)]
        }
    }
}
