//! Reverse-mode differentiation over a recorded sequence of array primitives.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep. Every
//! node keeps its forward value; the backward rules read whatever they need
//! from those values instead of saving separate intermediates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gridcore::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sin,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sin => x.sin(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// How the right operand of a binary primitive lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand holds one value per trailing-axis entry, shared by every row.
    Row,
    /// Right operand holds one value per row, shared across the trailing axis.
    Column,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Pointwise {
        x: NodeId,
        f: Activation,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Conv3x3 {
        x: NodeId,
        kernel: [f64; 9],
    },
    Binary {
        a: NodeId,
        b: NodeId,
        op: BinaryOp,
        bcast: Broadcast,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Channels {
        x: NodeId,
        start: usize,
    },
    Patches {
        x: NodeId,
        stride: usize,
    },
    MeanRows {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Parameters of one [`ParamStore`] bound as tape leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter entry `{name}`")))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= a * b` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) {
    match acc {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *acc = Some(g),
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t, false)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value, true))
    }

    /// Binds every entry of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let nodes = store
            .iter()
            .map(|(name, e)| {
                let id = self.push(Op::Param(name.to_string()), e.value.clone(), true);
                (name.to_string(), id)
            })
            .collect();
        Bound { nodes }
    }

    /// `x · w (+ b)` over the trailing axis of `x`; leading axes are kept.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::dim("affine", xv.shape(), wv.shape()));
        }
        let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::dim("affine bias", wv.shape(), bv.shape()));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            m,
            k,
            n,
            xv.data(),
            (k as isize, 1),
            wv.data(),
            (n as isize, 1),
            &mut out,
            b.is_some(),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Affine { x, w, b }, value, rg))
    }

    pub fn pointwise(&mut self, x: NodeId, f: Activation) -> NodeId {
        let value = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(Op::Pointwise { x, f }, value, rg)
    }

    /// Which ReLU inputs on the tape are positive, in recording order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Pointwise { x, f: Activation::Relu } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, Activation::Sin)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, Activation::Relu)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(Op::Scale { x, factor }, value, rg)
    }

    /// Same-size depthwise 3x3 correlation of an `[H, W, C]` grid with a fixed
    /// kernel (row-major `k[di][dj]`), zero padded.
    pub fn conv3x3_depthwise(&mut self, x: NodeId, kernel: [f64; 9]) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[0] < 3 || s[1] < 3 {
            return Err(Error::dim("conv3x3_depthwise", s, &[3, 3]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; h * w * c];
        conv3x3_accumulate(xv.data(), &mut out, h, w, c, &kernel);
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Conv3x3 { x, kernel }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Elementwise add/mul. `b` may match `a` exactly, hold one value per
    /// trailing-axis entry (broadcast over rows), or one value per row with a
    /// trailing axis of 1 (broadcast over channels).
    pub fn binary(&mut self, a: NodeId, b: NodeId, op: BinaryOp) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let c = av.cols();
        let bcast = if sa == sb {
            Broadcast::Same
        } else if bv.len() == c && (sb.len() == 1 || sb.iter().rev().skip(1).all(|&d| d == 1)) {
            Broadcast::Row
        } else if sb.len() == sa.len() && sb[..sb.len() - 1] == sa[..sa.len() - 1] && bv.cols() == 1
        {
            Broadcast::Column
        } else {
            return Err(Error::dim("elementwise_binary", sa, sb));
        };
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Mul => x * y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match bcast {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => ad
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect(),
            Broadcast::Column => ad
                .chunks_exact(c)
                .zip(bd)
                .flat_map(|(row, &y)| row.iter().map(move |&x| f(x, y)))
                .collect(),
        };
        let value = Tensor::new(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary { a, b, op, bcast }, value, rg))
    }

    /// Mean squared difference over all elements, as a one-element tensor.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::dim("mse", pv.shape(), tv.shape()));
        }
        let sum: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / pv.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Mse { pred, target }, value, rg))
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[s.len() - 1];
        }
        let rows = self.value(parts[0]).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let value = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(x).channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Channels { x, start }, value, rg))
    }

    /// 3x3 patch extraction (zero padding 1) of an `[H, W, C]` grid at the
    /// given stride, giving `[Ho, Wo, 9C]` with patch-major then channel order.
    /// Followed by [`Tape::affine`] this is a learned strided convolution.
    pub fn patches3x3(&mut self, x: NodeId, stride: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || stride == 0 {
            return Err(Error::dim("patches3x3", s, &[stride]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let mut out = vec![0.0; ho * wo * 9 * c];
        let xd = xv.data();
        for oi in 0..ho {
            for oj in 0..wo {
                let base = (oi * wo + oj) * 9 * c;
                for a in 0..3 {
                    let i = (oi * stride + a) as isize - 1;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for b in 0..3 {
                        let j = (oj * stride + b) as isize - 1;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        let src = (i as usize * w + j as usize) * c;
                        let dst = base + (a * 3 + b) * c;
                        out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
        let value = Tensor::new(&[ho, wo, 9 * c], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Patches { x, stride }, value, rg))
    }

    /// Mean over all leading positions, giving `[1, C]`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for row in xv.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let value = Tensor::new(&[1, c], out).expect("mean_rows shape");
        let rg = self.rg(x);
        self.push(Op::MeanRows { x }, value, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf,
    /// keyed by parameter name.
    pub fn gradients(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        self.sweep(loss, |name, g| {
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.to_string(), g);
                }
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Accumulates `∂loss/∂param` into the gradients of `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_scaled(loss, store, 1.0)
    }

    /// As [`Tape::backward`] with the incoming loss gradient set to `scale`.
    pub fn backward_scaled(&self, loss: NodeId, store: &mut ParamStore, scale: f64) -> Result<()> {
        self.sweep(loss, |name, g| store.accumulate_grad(name, &g, scale))
    }

    fn sweep(
        &self,
        loss: NodeId,
        mut sink: impl FnMut(&str, Tensor) -> Result<()>,
    ) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "loss node {} is not recorded on this tape ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut sink)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        sink: &mut impl FnMut(&str, Tensor) -> Result<()>,
    ) -> Result<()> {
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => sink(name, g)?,
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    // dx = g · wᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        wv.data(),
                        (1, n as isize),
                        &mut dx,
                        false,
                    );
                    add_into(&mut grads[x.0], Tensor::new(xv.shape(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    // dw = xᵀ · g
                    gemm(
                        k,
                        m,
                        n,
                        xv.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        &mut dw,
                        false,
                    );
                    add_into(&mut grads[w.0], Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[b.0], Tensor::new(self.value(b).shape(), db)?);
                }
            }
            Op::Pointwise { x, f } => {
                let (xv, yv) = (self.value(*x), &node.value);
                let data = match f {
                    Activation::Sin => xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| x.cos() * g)
                        .collect(),
                    Activation::Sigmoid => yv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, g)| y * (1.0 - y) * g)
                        .collect(),
                    Activation::Relu => xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                };
                add_into(&mut grads[x.0], Tensor::new(xv.shape(), data)?);
            }
            Op::Scale { x, factor } => {
                add_into(&mut grads[x.0], g.map(|v| v * factor));
            }
            Op::Conv3x3 { x, kernel } => {
                let s = node.value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                // Adjoint of correlation is correlation with the flipped kernel.
                let mut flipped = *kernel;
                flipped.reverse();
                let mut dx = vec![0.0; h * w * c];
                conv3x3_accumulate(g.data(), &mut dx, h, w, c, &flipped);
                add_into(&mut grads[x.0], Tensor::new(s, dx)?);
            }
            Op::Binary { a, b, op, bcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                if self.rg(*a) {
                    let da = match op {
                        BinaryOp::Add => g.clone(),
                        BinaryOp::Mul => {
                            let gd = g.data();
                            let bd = bv.data();
                            let data: Vec<f64> = match bcast {
                                Broadcast::Same => {
                                    gd.iter().zip(bd).map(|(g, y)| g * y).collect()
                                }
                                Broadcast::Row => gd
                                    .chunks_exact(c)
                                    .flat_map(|row| row.iter().zip(bd).map(|(g, y)| g * y))
                                    .collect(),
                                Broadcast::Column => gd
                                    .chunks_exact(c)
                                    .zip(bd)
                                    .flat_map(|(row, &y)| row.iter().map(move |g| g * y))
                                    .collect(),
                            };
                            Tensor::new(av.shape(), data)?
                        }
                    };
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    // Elementwise contribution before reducing over broadcast axes.
                    let full: Vec<f64> = match op {
                        BinaryOp::Add => g.data().to_vec(),
                        BinaryOp::Mul => g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                    };
                    let db = match bcast {
                        Broadcast::Same => full,
                        Broadcast::Row => {
                            let mut acc = vec![0.0; c];
                            for row in full.chunks_exact(c) {
                                for (d, v) in acc.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                            acc
                        }
                        Broadcast::Column => full.chunks_exact(c).map(|r| r.iter().sum()).collect(),
                    };
                    add_into(&mut grads[b.0], Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let k = 2.0 * g.item() / pv.len() as f64;
                let diff: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(p, t)| k * (p - t))
                    .collect();
                if self.rg(*target) {
                    let neg = diff.iter().map(|d| -d).collect();
                    add_into(&mut grads[target.0], Tensor::new(tv.shape(), neg)?);
                }
                if self.rg(*pred) {
                    add_into(&mut grads[pred.0], Tensor::new(pv.shape(), diff)?);
                }
            }
            Op::Concat { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let s = r * total + offset;
                            data.extend_from_slice(&g.data()[s..s + c]);
                        }
                        add_into(&mut grads[p.0], Tensor::new(pv.shape(), data)?);
                    }
                    offset += c;
                }
            }
            Op::Channels { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), node.value.cols());
                let mut dx = vec![0.0; xv.len()];
                for (dst, src) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                add_into(&mut grads[x.0], Tensor::new(xv.shape(), dx)?);
            }
            Op::Patches { x, stride } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[0], os[1]);
                let mut dx = vec![0.0; xv.len()];
                let gd = g.data();
                for oi in 0..ho {
                    for oj in 0..wo {
                        let base = (oi * wo + oj) * 9 * c;
                        for a in 0..3 {
                            let i = (oi * stride + a) as isize - 1;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for b in 0..3 {
                                let j = (oj * stride + b) as isize - 1;
                                if j < 0 || j >= w as isize {
                                    continue;
                                }
                                let dst = (i as usize * w + j as usize) * c;
                                let src = base + (a * 3 + b) * c;
                                for k in 0..c {
                                    dx[dst + k] += gd[src + k];
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], Tensor::new(s, dx)?);
            }
            Op::MeanRows { x } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = 1.0 / r as f64;
                let mut dx = Vec::with_capacity(xv.len());
                for _ in 0..r {
                    dx.extend(g.data().iter().map(|v| v * inv));
                }
                debug_assert_eq!(dx.len(), r * c);
                add_into(&mut grads[x.0], Tensor::new(xv.shape(), dx)?);
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                add_into(&mut grads[x.0], g.reshape(&shape)?);
            }
        }
        Ok(())
    }
}

/// `out += correlate(x, kernel)` with zero padding.
fn conv3x3_accumulate(x: &[f64], out: &mut [f64], h: usize, w: usize, c: usize, k: &[f64; 9]) {
    for i in 0..h {
        for j in 0..w {
            let dst = (i * w + j) * c;
            for di in 0..3 {
                let si = i as isize + di as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for dj in 0..3 {
                    let kv = k[di * 3 + dj];
                    if kv == 0.0 {
                        continue;
                    }
                    let sj = j as isize + dj as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    for ch in 0..c {
                        out[dst + ch] += kv * x[src + ch];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let w2 = tape.constant(t(&[2, 2], &[0.3, -7.0, 2.0, 1.1]));
        let b2 = tape.constant(t(&[2], &[3.0, -1.0]));
        let y2 = tape.affine(z, w2, Some(b2)).unwrap();
        assert_eq!(tape.value(y2).data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        match tape.affine(x, w, None) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![1, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn affine_weight_gradient() {
        // out-grad [[1,1]] through x=[[1,2]] is dw = xᵀ g = [[1,1],[2,2]].
        let mut store = ParamStore::new();
        store.insert("w", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.param(&store, "w").unwrap();
        let y = tape.affine(x, w, None).unwrap();
        // sum(y) via mse against zeros is quadratic; use a linear readout instead.
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let s = tape.affine(y, ones, None).unwrap();
        let s = tape.reshape(s, &[1]).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, std::f64::consts::FRAC_PI_2]));
        let y = tape.sin(x);
        assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn relu_subgradient() {
        let mut store = ParamStore::new();
        store.insert("x", t(&[3], &[-1.0, 2.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.relu(x);
        let w = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let y = tape.reshape(y, &[1, 3]).unwrap();
        let s = tape.affine(y, w, None).unwrap();
        let s = tape.reshape(s, &[1]).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 5, 2], |i| (i as f64 * 0.37).sin()));
        let id = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let y = tape.conv3x3_depthwise(x, id).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn conv_too_small() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5, 1]));
        assert!(matches!(
            tape.conv3x3_depthwise(x, [0.0; 9]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn binary_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let o = tape.constant(t(&[2], &[1.0, 1.0]));
        let m0 = tape.mul(a, z).unwrap();
        let m1 = tape.mul(a, o).unwrap();
        assert_eq!(tape.value(m0).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(m1).data(), &[1.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn binary_broadcasts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let row = tape.constant(t(&[3], &[1.0, 10.0, 100.0]));
        let col = tape.constant(t(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]));
        let r = tape.mul(a, row).unwrap();
        assert_eq!(&tape.value(r).data()[..3], &[0.0, 10.0, 200.0]);
        let c = tape.mul(a, col).unwrap();
        assert_eq!(&tape.value(c).data()[..6], &[0.0, 0.0, 0.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn product_rule() {
        let mut store = ParamStore::new();
        store.insert("a", t(&[1], &[3.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.constant(t(&[1], &[5.0]));
        let y = tape.mul(a, b).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get("a").unwrap().grad.data(), &[5.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 1.0]));
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.mse(p, z).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l0 = tape.mse(p, p).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.mse(p, bad).is_err());
    }

    #[test]
    fn backward_rejects_foreign_or_vector_loss() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(v, &mut store), Err(Error::Usage(_))));
        assert!(matches!(
            tape.backward(NodeId(99), &mut store),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("used", t(&[1], &[2.0]));
        store.insert("unused", t(&[1], &[4.0]));
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let u = b.get("used").unwrap();
        let l = tape.mul(u, u).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get("unused").unwrap().grad.data(), &[0.0]);
        assert_eq!(store.get("used").unwrap().grad.data(), &[4.0]);
    }

    #[test]
    fn patches_then_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 4, 1], |i| i as f64));
        let p = tape.patches3x3(x, 2).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 2, 9]);
        // Centre tap of output (0,0) reads input (0,0); of (1,1) reads (2,2).
        assert_eq!(tape.value(p).at3(0, 0, 4), 0.0);
        assert_eq!(tape.value(p).at3(1, 1, 4), 10.0);
        // Top-left tap of output (0,0) is padding.
        assert_eq!(tape.value(p).at3(0, 0, 0), 0.0);
        let m = tape.mean_rows(p);
        assert_eq!(tape.value(m).shape(), &[1, 9]);
    }
}
