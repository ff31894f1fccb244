//! Reverse-mode differentiation over a linear record of matrix primitives.
//!
//! The tape is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so parents always precede children and a single reverse
//! sweep accumulates every gradient.

use std::fmt;
use std::sync::Arc;

use super::params::ParamSet;
use super::tensor::{gemm, Tensor2D};
use crate::error::{Error, Result};

/// Probabilities fed to binary cross-entropy are clamped into this band.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Scalar function applied independently to each row, producing an `n x 1`
/// column. Implementors supply the analytic gradient with respect to the row.
pub trait RowFunction: Send + Sync + fmt::Debug {
    fn value(&self, row: &[f64]) -> f64;
    fn gradient(&self, row: &[f64], out: &mut [f64]);
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(NodeId, NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulConst(NodeId, Tensor2D),
    RowMap(NodeId, Arc<dyn RowFunction>),
    SelectCol(NodeId, usize),
    Mean(NodeId),
    Sum(NodeId),
    Mse(NodeId, Tensor2D),
    Bce(NodeId, Tensor2D),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor2D,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn shape_str(t: &Tensor2D) -> String {
    format!("{}x{}", t.rows(), t.cols())
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

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2D, requires_grad: bool) -> NodeId {
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

    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Leaf for parameter `idx`. Repeated calls return the same node so that
    /// several forward passes sharing parameters accumulate into one gradient.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        if self.param_nodes.len() <= idx {
            self.param_nodes.resize(idx + 1, None);
        }
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        let id = self.push(Op::Param(idx), params.get(idx).clone(), true);
        self.param_nodes[idx] = Some(id);
        id
    }

    /// `x · w + b` with `b` a `1 x out` row broadcast over the batch.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(Error::dim("affine input", wv.rows(), xv.cols()));
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::dim(
                "affine bias",
                format!("1x{}", wv.cols()),
                shape_str(bv),
            ));
        }
        let mut out = gemm(xv, false, wv, false);
        let bias = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Affine { x, w, b }, out, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hcat(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), v, rg)
    }

    fn check_same(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::dim(ctx, shape_str(av), shape_str(bv)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: NodeId, c: Tensor2D) -> Result<NodeId> {
        if !self.value(a).same_shape(&c) {
            return Err(Error::dim("mul_const", shape_str(self.value(a)), shape_str(&c)));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst(a, c), v, rg))
    }

    pub fn row_map(&mut self, a: NodeId, f: Arc<dyn RowFunction>) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| f.value(av.row(r))).collect();
        let v = Tensor2D::from_raw(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(Op::RowMap(a, f), v, rg)
    }

    pub fn select_col(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let av = self.value(a);
        if col >= av.cols() {
            return Err(Error::dim("select_col", format!("col < {}", av.cols()), col));
        }
        let v = Tensor2D::from_raw(av.rows(), 1, av.col_values(col));
        let rg = self.rg(a);
        Ok(self.push(Op::SelectCol(a, col), v, rg))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor2D::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(Op::Mean(a), v, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor2D::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: Tensor2D) -> Result<NodeId> {
        let pv = self.value(pred);
        if !pv.same_shape(&target) {
            return Err(Error::dim("mse", shape_str(&target), shape_str(pv)));
        }
        let loss = pv.zip_map(&target, |p, t| (p - t) * (p - t)).mean();
        let rg = self.rg(pred);
        Ok(self.push(Op::Mse(pred, target), Tensor2D::scalar(loss), rg))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, prob: NodeId, target: Tensor2D) -> Result<NodeId> {
        let pv = self.value(prob);
        if !pv.same_shape(&target) {
            return Err(Error::dim("bce", shape_str(&target), shape_str(pv)));
        }
        let loss = pv.zip_map(&target, bce_term).mean();
        let rg = self.rg(prob);
        Ok(self.push(Op::Bce(prob, target), Tensor2D::scalar(loss), rg))
    }

    /// Gradient of the scalar `loss` with respect to every parameter in
    /// `params`. Parameters that never entered the tape, or that have no
    /// path to `loss`, receive zeros.
    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> Result<Vec<Tensor2D>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}",
                shape_str(self.value(loss))
            )));
        }
        let mut out = params.zeros_like();
        let mut grads: Vec<Option<Tensor2D>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(idx) => {
                    if *idx < out.len() {
                        out[*idx].add_assign(&g);
                    }
                }
                Op::Affine { x, w, b } => {
                    if self.rg(*x) {
                        let dx = gemm(&g, false, self.value(*w), true);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let dw = gemm(self.value(*x), true, &g, false);
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor2D::from_raw(1, g.cols(), db));
                    }
                }
                Op::Relu(a) => {
                    // ReLU'(0) = 0.
                    let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let da = Tensor2D::from_fn(g.rows(), ac, |r, c| g.get(r, c));
                    let db = Tensor2D::from_fn(g.rows(), bc, |r, c| g.get(r, ac + c));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y)),
                Op::RowMap(a, f) => {
                    let av = self.value(*a);
                    let mut d = Tensor2D::zeros(av.rows(), av.cols());
                    let mut buf = vec![0.0; av.cols()];
                    for r in 0..av.rows() {
                        f.gradient(av.row(r), &mut buf);
                        let gr = g.get(r, 0);
                        for (o, b) in d.row_mut(r).iter_mut().zip(&buf) {
                            *o = gr * b;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SelectCol(a, col) => {
                    let av = self.value(*a);
                    let mut d = Tensor2D::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        d.set(r, *col, g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0] / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor2D::filled(av.rows(), av.cols(), gv));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor2D::filled(av.rows(), av.cols(), g.data()[0]));
                }
                Op::Mse(p, t) => {
                    let pv = self.value(*p);
                    let k = 2.0 * g.data()[0] / pv.len() as f64;
                    accumulate(&mut grads, *p, pv.zip_map(t, |p, t| k * (p - t)));
                }
                Op::Bce(p, t) => {
                    let pv = self.value(*p);
                    let k = g.data()[0] / pv.len() as f64;
                    accumulate(&mut grads, *p, pv.zip_map(t, |p, t| k * bce_grad(p, t)));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], id: NodeId, g: Tensor2D) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let pc = clamp_prob(p);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

fn bce_grad(p: f64, t: f64) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        // Flat region of the clamped loss.
        return 0.0;
    }
    (p - t) / (p * (1.0 - p))
}
