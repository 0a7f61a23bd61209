//! Eager reverse-mode autodiff on a growing tape.
//!
//! Every backward rule is itself expressed through tape operations, so a
//! gradient node is an ordinary node and can be differentiated again. That is
//! what lets the trainer push a validation loss through a lookahead parameter
//! update and back into the manipulation parameters exactly, without finite
//! differences.

use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddScalar(NodeId, f64),
    AddConstTensor(NodeId, Rc<Tensor>),
    MulConstTensor(NodeId, Rc<Tensor>),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    SumCols(NodeId),
    SumRows(NodeId),
    BroadcastScalar(NodeId, usize, usize),
    RepeatCols(NodeId, usize),
    RepeatRows(NodeId, usize),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    ScatterAddRows(NodeId, Rc<Vec<usize>>, usize),
    TakePerRow(NodeId, Rc<Vec<usize>>),
    ScatterPerRow(NodeId, Rc<Vec<usize>>, usize),
    ConcatRows(Rc<Vec<NodeId>>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Rc<Vec<NodeId>>),
    SliceCols(NodeId, usize, usize),
    /// Forward value is the stored hard tensor; gradient passes to the input
    /// unchanged (straight-through estimator).
    StraightThrough(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.shape(), (1, 1), "expected scalar node");
        t.data[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite() || matches!(op, Op::AddConstTensor(..)), "non-finite node value");
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    // ---- node constructors -------------------------------------------------

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.requires_grad(a);
        self.push(v, Op::ScaleConst(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let rg = self.requires_grad(a);
        self.push(v, Op::AddScalar(a, s), rg)
    }

    pub fn add_const_tensor(&mut self, a: NodeId, t: Rc<Tensor>) -> NodeId {
        let v = self.value(a).zip(&t, |x, y| x + y);
        let rg = self.requires_grad(a);
        self.push(v, Op::AddConstTensor(a, t), rg)
    }

    pub fn mul_const_tensor(&mut self, a: NodeId, t: Rc<Tensor>) -> NodeId {
        let v = self.value(a).zip(&t, |x, y| x * y);
        let rg = self.requires_grad(a);
        self.push(v, Op::MulConstTensor(a, t), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.requires_grad(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.requires_grad(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Sum over columns: (r, c) -> (r, 1).
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows, 1);
        for r in 0..t.rows {
            v.data[r] = t.row(r).iter().sum();
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Sum over rows: (r, c) -> (1, c).
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for c in 0..t.cols {
                v.data[c] += t.get(r, c);
            }
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::SumRows(a), rg)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let s = self.scalar_value(a);
        let rg = self.requires_grad(a);
        self.push(Tensor::filled(rows, cols, s), Op::BroadcastScalar(a, rows, cols), rg)
    }

    /// (r, 1) -> (r, c) by repeating the column.
    pub fn repeat_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.cols, 1, "repeat_cols expects a column vector");
        let mut v = Tensor::zeros(t.rows, cols);
        for r in 0..t.rows {
            for c in 0..cols {
                v.data[r * cols + c] = t.data[r];
            }
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::RepeatCols(a, cols), rg)
    }

    /// (1, c) -> (r, c) by repeating the row.
    pub fn repeat_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows, 1, "repeat_rows expects a row vector");
        let mut v = Tensor::zeros(rows, t.cols);
        for r in 0..rows {
            v.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(&t.data);
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::RepeatRows(a, rows), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.requires_grad(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let rg = self.requires_grad(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.requires_grad(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.requires_grad(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        let rg = self.requires_grad(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.requires_grad(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let t = self.value(a);
        let mut v = Tensor::zeros(idx.len(), t.cols);
        for (out_r, &src_r) in idx.iter().enumerate() {
            v.data[out_r * t.cols..(out_r + 1) * t.cols].copy_from_slice(t.row(src_r));
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::GatherRows(a, idx), rg)
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>, n_rows: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows, idx.len());
        let mut v = Tensor::zeros(n_rows, t.cols);
        for (src_r, &dst_r) in idx.iter().enumerate() {
            for c in 0..t.cols {
                v.data[dst_r * t.cols + c] += t.get(src_r, c);
            }
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::ScatterAddRows(a, idx, n_rows), rg)
    }

    /// Pick one entry per row: (r, c) with idx[r] -> (r, 1).
    pub fn take_per_row(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows, idx.len());
        let mut v = Tensor::zeros(t.rows, 1);
        for r in 0..t.rows {
            v.data[r] = t.get(r, idx[r]);
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::TakePerRow(a, idx), rg)
    }

    /// Inverse of take_per_row: (r, 1) -> (r, c) with the value at idx[r].
    pub fn scatter_per_row(&mut self, a: NodeId, idx: Rc<Vec<usize>>, cols: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.cols, 1);
        assert_eq!(t.rows, idx.len());
        let mut v = Tensor::zeros(t.rows, cols);
        for r in 0..t.rows {
            v.data[r * cols + idx[r]] = t.data[r];
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::ScatterPerRow(a, idx, cols), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            v.data[at..at + t.len()].copy_from_slice(&t.data);
            at += t.len();
        }
        let rg = self.any_grad(parts);
        self.push(v, Op::ConcatRows(Rc::new(parts.to_vec())), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let t = self.value(a);
        assert!(r0 < r1 && r1 <= t.rows);
        let v = Tensor::from_vec(r1 - r0, t.cols, t.data[r0 * t.cols..r1 * t.cols].to_vec());
        let rg = self.requires_grad(a);
        self.push(v, Op::SliceRows(a, r0, r1), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.data[r * cols + at..r * cols + at + t.cols].copy_from_slice(t.row(r));
            }
            at += t.cols;
        }
        let rg = self.any_grad(parts);
        self.push(v, Op::ConcatCols(Rc::new(parts.to_vec())), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let t = self.value(a);
        assert!(c0 < c1 && c1 <= t.cols);
        let mut v = Tensor::zeros(t.rows, c1 - c0);
        for r in 0..t.rows {
            v.data[r * (c1 - c0)..(r + 1) * (c1 - c0)].copy_from_slice(&t.row(r)[c0..c1]);
        }
        let rg = self.requires_grad(a);
        self.push(v, Op::SliceCols(a, c0, c1), rg)
    }

    /// Forward the hard tensor, backpropagate into `soft` unchanged.
    pub fn straight_through(&mut self, soft: NodeId, hard: Tensor) -> NodeId {
        assert_eq!(self.value(soft).shape(), hard.shape());
        let rg = self.requires_grad(soft);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    // ---- composite helpers -------------------------------------------------

    /// x W + b with b broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        let rows = self.value(xw).rows;
        let bb = self.repeat_rows(b, rows);
        self.add(xw, bb)
    }

    /// Row-wise softmax, shift-stabilized with a detached per-row max.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let shifted = self.sub_row_max(x);
        let e = self.exp(shifted);
        let denom = self.sum_cols(e);
        let inv = self.recip(denom);
        let cols = self.value(x).cols;
        let invrep = self.repeat_cols(inv, cols);
        self.mul(e, invrep)
    }

    /// Row-wise log-softmax with the same detached shift.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let shifted = self.sub_row_max(x);
        let e = self.exp(shifted);
        let denom = self.sum_cols(e);
        let logd = self.ln(denom);
        let cols = self.value(x).cols;
        let logrep = self.repeat_cols(logd, cols);
        self.sub(shifted, logrep)
    }

    /// Subtract each row's max as a constant. Softmax is shift-invariant, so
    /// detaching the max does not change gradients.
    fn sub_row_max(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mut shift = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let m = t.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for c in 0..t.cols {
                shift.data[r * t.cols + c] = -m;
            }
        }
        self.add_const_tensor(x, Rc::new(shift))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row layer norm: gamma * (x - mu) / sqrt(var + eps) + beta.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (rows, cols) = self.value(x).shape();
        let mu = self.sum_cols(x);
        let mu = self.scale(mu, 1.0 / cols as f64);
        let murep = self.repeat_cols(mu, cols);
        let centered = self.sub(x, murep);
        let sq = self.mul(centered, centered);
        let var = self.sum_cols(sq);
        let var = self.scale(var, 1.0 / cols as f64);
        let var = self.add_scalar(var, eps);
        let std = self.sqrt(var);
        let inv = self.recip(std);
        let invrep = self.repeat_cols(inv, cols);
        let normed = self.mul(centered, invrep);
        let grep = self.repeat_rows(gamma, rows);
        let scaled = self.mul(normed, grep);
        let brep = self.repeat_rows(beta, rows);
        self.add(scaled, brep)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to `targets`.
    ///
    /// Returns one gradient node per target (None when the target does not
    /// influence the loss). With `create_graph` the gradient nodes keep their
    /// own gradient flags so they can be differentiated again.
    pub fn grad(&mut self, loss: NodeId, targets: &[NodeId], create_graph: bool) -> Vec<Option<NodeId>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "grad expects a scalar loss");
        let mut adjoint: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let seed = if create_graph {
            self.leaf_like_constant(Tensor::scalar(1.0))
        } else {
            self.constant(Tensor::scalar(1.0))
        };
        adjoint[loss.0] = Some(seed);

        let force_no_grad = !create_graph;
        for i in (0..=loss.0).rev() {
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, g, &mut adjoint, force_no_grad);
        }

        // When not building a differentiable graph, strip gradient flags from
        // everything created during this sweep so later sweeps skip it.
        if force_no_grad {
            // nothing to do: backward_op already created nodes normally; the
            // flags only matter if someone differentiates the results, which
            // callers of create_graph=false do not.
        }

        targets.iter().map(|t| adjoint[t.0]).collect()
    }

    fn leaf_like_constant(&mut self, t: Tensor) -> NodeId {
        self.constant(t)
    }

    /// Convenience: gradients extracted as plain tensors.
    pub fn grad_values(&mut self, loss: NodeId, targets: &[NodeId]) -> Vec<Option<Tensor>> {
        let ids = self.grad(loss, targets, false);
        ids.into_iter().map(|o| o.map(|id| self.value(id).clone())).collect()
    }

    fn accumulate(&mut self, adjoint: &mut Vec<Option<NodeId>>, target: NodeId, contrib: NodeId) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let merged = match adjoint[target.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        };
        adjoint.resize(self.nodes.len().max(adjoint.len()), None);
        adjoint[target.0] = Some(merged);
    }

    fn backward_op(&mut self, node: usize, op: &Op, g: NodeId, adjoint: &mut Vec<Option<NodeId>>, _no_graph: bool) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(adjoint, a, g);
                self.accumulate(adjoint, b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(adjoint, a, g);
                let neg = self.scale(g, -1.0);
                self.accumulate(adjoint, b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let da = self.mul(g, b);
                    self.accumulate(adjoint, a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = self.mul(g, a);
                    self.accumulate(adjoint, b, db);
                }
            }
            Op::ScaleConst(a, s) => {
                let (a, s) = (*a, *s);
                let da = self.scale(g, s);
                self.accumulate(adjoint, a, da);
            }
            Op::AddScalar(a, _) | Op::AddConstTensor(a, _) => {
                let a = *a;
                self.accumulate(adjoint, a, g);
            }
            Op::MulConstTensor(a, t) => {
                let (a, t) = (*a, Rc::clone(t));
                let da = self.mul_const_tensor(g, t);
                self.accumulate(adjoint, a, da);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bt = self.transpose(b);
                    let da = self.matmul(g, bt);
                    self.accumulate(adjoint, a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.transpose(a);
                    let db = self.matmul(at, g);
                    self.accumulate(adjoint, b, db);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let da = self.transpose(g);
                self.accumulate(adjoint, a, da);
            }
            Op::Sum(a) => {
                let a = *a;
                let (r, c) = self.value(a).shape();
                let da = self.broadcast_scalar(g, r, c);
                self.accumulate(adjoint, a, da);
            }
            Op::SumCols(a) => {
                let a = *a;
                let c = self.value(a).cols;
                let da = self.repeat_cols(g, c);
                self.accumulate(adjoint, a, da);
            }
            Op::SumRows(a) => {
                let a = *a;
                let r = self.value(a).rows;
                let da = self.repeat_rows(g, r);
                self.accumulate(adjoint, a, da);
            }
            Op::BroadcastScalar(a, _, _) => {
                let a = *a;
                let da = self.sum(g);
                self.accumulate(adjoint, a, da);
            }
            Op::RepeatCols(a, _) => {
                let a = *a;
                let da = self.sum_cols(g);
                self.accumulate(adjoint, a, da);
            }
            Op::RepeatRows(a, _) => {
                let a = *a;
                let da = self.sum_rows(g);
                self.accumulate(adjoint, a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let y = NodeId(node);
                let da = self.mul(g, y);
                self.accumulate(adjoint, a, da);
            }
            Op::Ln(a) => {
                let a = *a;
                let inv = self.recip(a);
                let da = self.mul(g, inv);
                self.accumulate(adjoint, a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = NodeId(node);
                let y2 = self.mul(y, y);
                let y2n = self.scale(y2, -1.0);
                let one_minus = self.add_scalar(y2n, 1.0);
                let da = self.mul(g, one_minus);
                self.accumulate(adjoint, a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = NodeId(node);
                let yn = self.scale(y, -1.0);
                let one_minus = self.add_scalar(yn, 1.0);
                let yy = self.mul(y, one_minus);
                let da = self.mul(g, yy);
                self.accumulate(adjoint, a, da);
            }
            Op::Relu(a) => {
                let a = *a;
                let mask = Rc::new(self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                let da = self.mul_const_tensor(g, mask);
                self.accumulate(adjoint, a, da);
            }
            Op::Recip(a) => {
                let a = *a;
                let y = NodeId(node);
                let y2 = self.mul(y, y);
                let y2n = self.scale(y2, -1.0);
                let da = self.mul(g, y2n);
                self.accumulate(adjoint, a, da);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let y = NodeId(node);
                let inv = self.recip(y);
                let half = self.scale(inv, 0.5);
                let da = self.mul(g, half);
                self.accumulate(adjoint, a, da);
            }
            Op::GatherRows(a, idx) => {
                let (a, idx) = (*a, Rc::clone(idx));
                let n = self.value(a).rows;
                let da = self.scatter_add_rows(g, idx, n);
                self.accumulate(adjoint, a, da);
            }
            Op::ScatterAddRows(a, idx, _) => {
                let (a, idx) = (*a, Rc::clone(idx));
                let da = self.gather_rows(g, idx);
                self.accumulate(adjoint, a, da);
            }
            Op::TakePerRow(a, idx) => {
                let (a, idx) = (*a, Rc::clone(idx));
                let c = self.value(a).cols;
                let da = self.scatter_per_row(g, idx, c);
                self.accumulate(adjoint, a, da);
            }
            Op::ScatterPerRow(a, idx, _) => {
                let (a, idx) = (*a, Rc::clone(idx));
                let da = self.take_per_row(g, idx);
                self.accumulate(adjoint, a, da);
            }
            Op::ConcatRows(parts) => {
                let parts = Rc::clone(parts);
                let mut at = 0;
                for &p in parts.iter() {
                    let rows = self.value(p).rows;
                    if self.nodes[p.0].requires_grad {
                        let dp = self.slice_rows(g, at, at + rows);
                        self.accumulate(adjoint, p, dp);
                    }
                    at += rows;
                }
            }
            Op::SliceRows(a, r0, r1) => {
                let (a, r0, r1) = (*a, *r0, *r1);
                let (rows, cols) = self.value(a).shape();
                let mut parts = Vec::new();
                if r0 > 0 {
                    parts.push(self.constant(Tensor::zeros(r0, cols)));
                }
                parts.push(g);
                if r1 < rows {
                    parts.push(self.constant(Tensor::zeros(rows - r1, cols)));
                }
                let da = self.concat_rows(&parts);
                self.accumulate(adjoint, a, da);
            }
            Op::ConcatCols(parts) => {
                let parts = Rc::clone(parts);
                let mut at = 0;
                for &p in parts.iter() {
                    let cols = self.value(p).cols;
                    if self.nodes[p.0].requires_grad {
                        let dp = self.slice_cols(g, at, at + cols);
                        self.accumulate(adjoint, p, dp);
                    }
                    at += cols;
                }
            }
            Op::SliceCols(a, c0, c1) => {
                let (a, c0, c1) = (*a, *c0, *c1);
                let (rows, cols) = self.value(a).shape();
                let mut parts = Vec::new();
                if c0 > 0 {
                    parts.push(self.constant(Tensor::zeros(rows, c0)));
                }
                parts.push(g);
                if c1 < cols {
                    parts.push(self.constant(Tensor::zeros(rows, cols - c1)));
                }
                let da = self.concat_cols(&parts);
                self.accumulate(adjoint, a, da);
            }
            Op::StraightThrough(a) => {
                let a = *a;
                self.accumulate(adjoint, a, g);
            }
        }
    }
}
