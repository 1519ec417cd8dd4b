//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. Node ids are assigned in evaluation order, so walking the tape
//! backwards visits every node after all of its consumers.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    SoftmaxLast(usize),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    Reshape(usize),
    ConcatLast(Vec<usize>),
    NarrowLast(usize, usize),
    Dropout(usize, Vec<f64>),
    Gather(usize, Arc<Vec<usize>>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::eval()
    }
}

impl Tape {
    /// Tape in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Tape in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            training: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Differentiable input sharing storage with a parameter.
    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(Arc::new(value), op, rg)
    }

    /// Gradient of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss recorded on a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            for (parent, g) in vjp(&nodes, node, &gout)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep gradients of intermediate nodes only where someone asks.
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of the right shape if it did not affect the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }
}

/// How two operand shapes combine: equal, or the shorter one repeats as a suffix.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    RhsRepeats,
    LhsRepeats,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.len() <= a.len() && a.ends_with(b) {
        Ok(Bcast::RhsRepeats)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Bcast::LhsRepeats)
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let unary = |a: usize, f: &dyn Fn(usize, f64) -> f64| -> Vec<(usize, Tensor)> {
        let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
        vec![(a, Tensor::new(val(a).shape().to_vec(), data).expect("same shape"))]
    };
    let out = &node.value;
    Ok(match node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let gb = g.map(|x| sign * x);
            vec![
                (a, reduce_to(g, val(a).shape())),
                (b, reduce_to(&gb, val(b).shape())),
            ]
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (na, nb) = (va.numel(), vb.numel());
            let ga: Vec<f64> = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * vb.data()[i % nb])
                .collect();
            let gb: Vec<f64> = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * va.data()[i % na])
                .collect();
            let shape = out.shape().to_vec();
            vec![
                (a, reduce_to(&Tensor::new(shape.clone(), ga)?, va.shape())),
                (b, reduce_to(&Tensor::new(shape, gb)?, vb.shape())),
            ]
        }
        Op::Scale(a, c) => unary(a, &|_, gi| gi * c),
        Op::AddScalar(a) => unary(a, &|_, gi| gi),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut ga = vec![0.0; m * k];
            gemm(g.data(), false, vb.data(), true, m, n, k, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(va.data(), true, g.data(), false, k, m, n, &mut gb);
            vec![(a, Tensor::new([m, k], ga)?), (b, Tensor::new([k, n], gb)?)]
        }
        Op::Bmm(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for t in 0..bs {
                let gt = &g.data()[t * m * n..(t + 1) * m * n];
                let at = &va.data()[t * m * k..(t + 1) * m * k];
                let bt = &vb.data()[t * k * n..(t + 1) * k * n];
                gemm(gt, false, bt, true, m, n, k, &mut ga[t * m * k..(t + 1) * m * k]);
                gemm(at, true, gt, false, k, m, n, &mut gb[t * k * n..(t + 1) * k * n]);
            }
            vec![
                (a, Tensor::new([bs, m, k], ga)?),
                (b, Tensor::new([bs, k, n], gb)?),
            ]
        }
        Op::Relu(a) => {
            let x = val(a);
            unary(a, &|i, gi| if x.data()[i] > 0.0 { gi } else { 0.0 })
        }
        Op::Sigmoid(a) => unary(a, &|i, gi| {
            let y = out.data()[i];
            gi * y * (1.0 - y)
        }),
        Op::Exp(a) => unary(a, &|i, gi| gi * out.data()[i]),
        Op::Log(a) => {
            let x = val(a);
            unary(a, &|i, gi| gi / x.data()[i])
        }
        Op::Abs(a) => {
            let x = val(a);
            unary(a, &|i, gi| {
                let v = x.data()[i];
                if v > 0.0 {
                    gi
                } else if v < 0.0 {
                    -gi
                } else {
                    0.0
                }
            })
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(a);
            unary(a, &|i, gi| {
                let v = x.data()[i];
                if v > lo && v < hi {
                    gi
                } else {
                    0.0
                }
            })
        }
        Op::SoftmaxLast(a) => {
            let d = out.last_dim();
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for (row, (yr, gr)) in y.chunks(d).zip(g.data().chunks(d)).enumerate() {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[row * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(a, Tensor::new(val(a).shape().to_vec(), gx)?)]
        }
        Op::SumAll(a) => {
            let gi = g.item();
            vec![(a, Tensor::full(val(a).shape().to_vec(), gi))]
        }
        Op::MeanAll(a) => {
            let n = val(a).numel() as f64;
            let gi = g.item() / n;
            vec![(a, Tensor::full(val(a).shape().to_vec(), gi))]
        }
        Op::SumLast(a) => {
            let x = val(a);
            let d = x.last_dim();
            let data = (0..x.numel()).map(|i| g.data()[i / d]).collect();
            vec![(a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::Reshape(a) => vec![(a, g.clone().reshape(val(a).shape().to_vec())?)],
        Op::ConcatLast(ref parts) => {
            let widths: Vec<usize> = parts.iter().map(|&p| val(p).last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.numel() / total;
            let mut res = Vec::with_capacity(parts.len());
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let mut data = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    data.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                }
                res.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                off += w;
            }
            res
        }
        Op::NarrowLast(a, start) => {
            let x = val(a);
            let d = x.last_dim();
            let w = out.last_dim();
            let mut gx = vec![0.0; x.numel()];
            for (r, gr) in g.data().chunks(w).enumerate() {
                gx[r * d + start..r * d + start + w].copy_from_slice(gr);
            }
            vec![(a, Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::Dropout(a, ref mask) => unary(a, &|i, gi| gi * mask[i]),
        Op::Gather(a, ref idx) => {
            let mut gx = vec![0.0; val(a).numel()];
            for (&j, gi) in idx.iter().zip(g.data()) {
                gx[j] += gi;
            }
            vec![(a, Tensor::new(val(a).shape().to_vec(), gx)?)]
        }
    })
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (na, nb) = (a.numel(), b.numel());
        let (shape, len) = match broadcast(name, a.shape(), b.shape())? {
            Bcast::Same | Bcast::RhsRepeats => (a.shape().to_vec(), na),
            Bcast::LhsRepeats => (b.shape().to_vec(), nb),
        };
        let data = (0..len).map(|i| f(a.data()[i % na], b.data()[i % nb])).collect();
        Ok(self
            .tape
            .record(Tensor::new(shape, data)?, op, &[self.id, other.id]))
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.record(v, op, &[self.id])
    }

    /// Elementwise sum; `other` may also be a trailing-suffix shape (e.g. a bias row).
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::AddScalar(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let c = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .record(c, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Batched product of `(b, m, k)` and `(b, k, n)` operands.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for t in 0..bs {
            gemm(
                &a.data()[t * m * k..(t + 1) * m * k],
                false,
                &b.data()[t * k * n..(t + 1) * k * n],
                false,
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        Ok(self.tape.record(
            Tensor::new([bs, m, n], out)?,
            Op::Bmm(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.map(f64::ln, Op::Log(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.map(f64::abs, Op::Abs(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.map(|x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self) -> Var<'t> {
        let x = self.value();
        let d = x.last_dim();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape().to_vec(), y).expect("same shape");
        self.tape.record(t, Op::SoftmaxLast(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.sum() / x.numel() as f64;
        self.tape
            .record(Tensor::scalar(s), Op::MeanAll(self.id), &[self.id])
    }

    /// Sum over the trailing axis, dropping it.
    pub fn sum_last(&self) -> Var<'t> {
        let x = self.value();
        let d = x.last_dim();
        let data: Vec<f64> = x.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, data).expect("reduced shape");
        self.tape.record(t, Op::SumLast(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(t, Op::Reshape(self.id), &[self.id]))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&self) -> Result<Var<'t>> {
        let s = self.shape();
        let lead = s.first().copied().unwrap_or(1);
        self.reshape([lead, s.iter().skip(1).product()])
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if &v.shape()[..v.rank().saturating_sub(1)] != lead {
                return Err(Error::shape("concat", values[0].shape(), v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.last_dim()).sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let w = v.last_dim();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first
            .tape
            .record(Tensor::new(shape, data)?, Op::ConcatLast(ids.clone()), &ids))
    }

    /// Slice `[start, start + len)` of the trailing axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        if start + len > d {
            return Err(Error::shape("narrow", x.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(x.numel() / d.max(1) * len);
        for row in x.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.tape.record(
            Tensor::new(shape, data)?,
            Op::NarrowLast(self.id, start),
            &[self.id],
        ))
    }

    /// Inverted dropout; the identity on evaluation tapes or for `p == 0`.
    pub fn dropout(&self, p: f64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.tape.training || p == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = {
            let mut rng = self.tape.rng.borrow_mut();
            (0..x.numel())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(t, Op::Dropout(self.id, mask), &[self.id]))
    }

    /// Picks flat elements `index` into a tensor of shape `shape`.
    pub fn gather(&self, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let data = index
            .iter()
            .map(|&i| {
                x.data().get(i).copied().ok_or(Error::Bounds {
                    what: "gather",
                    index: i,
                    size: x.numel(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.tape.record(
            Tensor::new(shape, data)?,
            Op::Gather(self.id, Arc::new(index)),
            &[self.id],
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
