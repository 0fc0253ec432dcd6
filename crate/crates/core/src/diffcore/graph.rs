//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] walks it in reverse.

use super::special::{digamma, lgamma, trigamma};
use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// rank-2 `[r,c]` plus rank-1 `[c]`, broadcast over rows
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// softmax along the last axis
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Lgamma(NodeId),
    Digamma(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `Σ |a − b|`
    L1(NodeId, NodeId),
    MaxConst(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

/// A single forward computation. Values are immutable once a node is created.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; nodes the loss does not depend on get zeros.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected rank 1 or 2, got {:?}", t.shape())))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.nodes[id.0].trainable = true;
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn trainable_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(NodeId)
            .collect()
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(x).map(f);
        self.push(op, v)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, k) = dims2("matmul", av)?;
        let (k2, c) = dims2("matmul", bv)?;
        if av.rank() != 2 || bv.rank() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = matmul_raw(av.data(), bv.data(), r, k, c);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(r, c, out)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// `a[r,c] + b[c]` with `b` broadcast across rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let ok = av.rank() == 2 && bv.rank() == 1 && av.shape()[1] == bv.shape()[0];
        if !ok {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let c = bv.len();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        Ok(self.push(Op::AddRow(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn lgamma(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Lgamma(x), lgamma)
    }

    pub fn digamma(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Digamma(x), digamma)
    }

    /// `max(x, c)` elementwise.
    pub fn max_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::MaxConst(x, c), |v| v.max(c))
    }

    fn row_softmax(v: &Tensor, log: bool) -> Result<Tensor> {
        let (r, c) = dims2(if log { "log_softmax" } else { "softmax" }, v)?;
        let mut out = v.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lz = z.ln();
            for x in row.iter_mut() {
                *x = if log { *x - m - lz } else { (*x - m).exp() / z };
            }
        }
        Ok(out)
    }

    /// Softmax over the last axis (each row of a matrix, or the whole vector).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Self::row_softmax(self.value(x), false)?;
        Ok(self.push(Op::Softmax(x), v))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Self::row_softmax(self.value(x), true)?;
        Ok(self.push(Op::LogSoftmax(x), v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.sum() / v.len() as f64;
        Ok(self.push(Op::Mean(x), Tensor::scalar(m)))
    }

    /// `Σ |a − b|` over all elements.
    pub fn l1_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("l1_distance", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Op::L1(a, b), Tensor::scalar(s)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let (r, k) = (av.shape()[0], av.shape()[1]);
                    let c = bv.shape()[1];
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let bt = bv.transpose();
                    let da = matmul_raw(g.data(), bt.data(), r, c, k);
                    let at = av.transpose();
                    let db = matmul_raw(at.data(), g.data(), k, r, c);
                    acc(&mut grads, a, Tensor::matrix(r, k, da)?);
                    acc(&mut grads, b, Tensor::matrix(k, c, db)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let c = self.value(b).len();
                    let mut db = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        db[i % c] += x;
                    }
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, Tensor::vector(db));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, a, g.zip_map(self.value(b), |x, y| x * y));
                    acc(&mut grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
                Op::Scale(a, s) => acc(&mut grads, a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, a, g.clone()),
                Op::Tanh(a) => acc(&mut grads, a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
                Op::Softplus(a) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, z| x * sigmoid(z)),
                ),
                Op::Log(a) => acc(&mut grads, a, g.zip_map(self.value(a), |x, z| x / z)),
                Op::Exp(a) => acc(&mut grads, a, g.zip_map(out, |x, y| x * y)),
                Op::Abs(a) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, z| {
                        if z > 0.0 {
                            x
                        } else if z < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Lgamma(a) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, z| x * digamma(z)),
                ),
                Op::Digamma(a) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, z| x * trigamma(z)),
                ),
                Op::MaxConst(a, c) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, z| if z > c { x } else { 0.0 }),
                ),
                Op::Softmax(a) => {
                    let (r, c) = dims2("softmax", out)?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &out.data()[i * c..(i + 1) * c];
                        let gy = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    acc(&mut grads, a, Tensor::new(out.shape().to_vec(), d)?);
                }
                Op::LogSoftmax(a) => {
                    let (r, c) = dims2("log_softmax", out)?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &out.data()[i * c..(i + 1) * c];
                        let gy = &g.data()[i * c..(i + 1) * c];
                        let gs: f64 = gy.iter().sum();
                        for j in 0..c {
                            d[i * c + j] = gy[j] - y[j].exp() * gs;
                        }
                    }
                    acc(&mut grads, a, Tensor::new(out.shape().to_vec(), d)?);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(&mut grads, a, Tensor::full(self.value(a).shape(), gv));
                }
                Op::Mean(a) => {
                    let av = self.value(a);
                    let gv = g.item() / av.len() as f64;
                    acc(&mut grads, a, Tensor::full(av.shape(), gv));
                }
                Op::L1(a, b) => {
                    let gv = g.item();
                    let sign = self.value(a).zip_map(self.value(b), |x, y| {
                        if x > y {
                            gv
                        } else if x < y {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, b, sign.map(|x| -x));
                    acc(&mut grads, a, sign);
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}
