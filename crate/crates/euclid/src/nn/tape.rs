//! Define-by-run reverse-mode gradients over a closed primitive set.
//!
//! A [`Tape`] records a feed-forward graph as it is built; node values are
//! computed eagerly. [`Tape::backward`] then walks the graph once in reverse
//! and returns d(loss)/d(param) for every trainable parameter that entered
//! the graph via [`Tape::param`]. Values inserted with [`Tape::constant`]
//! (frozen nets, target nets, detached prediction targets) receive no
//! gradient, so stop-gradient is a structural property of the graph rather
//! than a runtime flag.

use std::collections::BTreeMap;

use crate::nn::error::{NnError, NnResult};
use crate::nn::optim::ParamStore;
use crate::nn::tensor::Tensor;

pub type NodeId = usize;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// The closed set of differentiable primitives.
enum Op {
    /// Leaf without gradient.
    Const,
    /// Leaf bound to a named trainable parameter.
    Param(String),
    /// x * w^T + b with x [B,in], w [out,in], b [1,out].
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Elu(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Column-wise concatenation of two tensors with equal row counts.
    ConcatCols(NodeId, NodeId),
    /// Per-row sum of squares, [B,N] -> [B,1].
    RowSumSq(NodeId),
    /// Mean over all entries, -> [1,1].
    MeanAll(NodeId),
    /// Elementwise clamp to [lo, hi]; pass-through gradient inside the range.
    Clip { x: NodeId, lo: f64, hi: f64 },
    /// Row-wise log-softmax.
    LogSoftmax(NodeId),
    /// Pick one column per row: out[i,0] = x[i, cols[i]].
    GatherCols { x: NodeId, cols: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// One node per distinct parameter name, so gradients accumulate in a
    /// single slot even when a parameter is referenced many times.
    param_nodes: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Insert a trainable parameter from `store`. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NnResult<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(Op::Param(name.to_string()), value);
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NnResult<NodeId> {
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        if xv.cols() != wv.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "affine input has {} features, weight expects {}",
                xv.cols(),
                wv.cols()
            )));
        }
        if bv.rows() != 1 || bv.cols() != wv.rows() {
            return Err(NnError::ShapeMismatch(format!(
                "affine bias is {}x{}, expected 1x{}",
                bv.rows(),
                bv.cols(),
                wv.rows()
            )));
        }
        let mut y = xv.matmul_nt(wv);
        for r in 0..y.rows() {
            let bias = bv.row(0);
            let row = y.row_mut(r);
            for (o, add) in row.iter_mut().zip(bias.iter()) {
                *o += add;
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x].value.map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        self.push(Op::Elu(x), y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x].value.map(f64::tanh);
        self.push(Op::Tanh(x), y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.nodes[x].value.map(|v| c * v);
        self.push(Op::Scale(x, c), y)
    }

    /// Add a scalar to every entry. A composite of `add` with a constant
    /// tensor, so it needs no primitive of its own.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let (rows, cols) = self.nodes[x].value.shape();
        let cn = self.constant(Tensor::full(rows, cols, c));
        self.add(x, cn).expect("shapes match by construction")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NnResult<NodeId> {
        self.nodes[a].value.require_same_shape(&self.nodes[b].value, "add")?;
        let y = self.nodes[a].value.zip_map(&self.nodes[b].value, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NnResult<NodeId> {
        self.nodes[a].value.require_same_shape(&self.nodes[b].value, "sub")?;
        let y = self.nodes[a].value.zip_map(&self.nodes[b].value, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), y))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NnResult<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows() != bv.rows() {
            return Err(NnError::ShapeMismatch(format!(
                "concat_cols row counts differ: {} vs {}",
                av.rows(),
                bv.rows()
            )));
        }
        let mut y = Tensor::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = y.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(Op::ConcatCols(a, b), y))
    }

    pub fn row_sum_sq(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut y = Tensor::zeros(xv.rows(), 1);
        for r in 0..xv.rows() {
            let mut acc = 0.0;
            for v in xv.row(r) {
                acc = v.mul_add(*v, acc);
            }
            y.set(r, 0, acc);
        }
        self.push(Op::RowSumSq(x), y)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mean = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(mean))
    }

    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y = self.nodes[x].value.map(|v| v.clamp(lo, hi));
        self.push(Op::Clip { x, lo, hi }, y)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut y = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (c, v) in row.iter().enumerate() {
                y.set(r, c, v - log_sum);
            }
        }
        self.push(Op::LogSoftmax(x), y)
    }

    pub fn gather_cols(&mut self, x: NodeId, cols: Vec<usize>) -> NnResult<NodeId> {
        let xv = &self.nodes[x].value;
        if cols.len() != xv.rows() {
            return Err(NnError::ShapeMismatch(format!(
                "gather_cols needs one index per row: {} indices for {} rows",
                cols.len(),
                xv.rows()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.cols()) {
            return Err(NnError::ShapeMismatch(format!(
                "gather_cols index {} out of range for {} columns",
                bad,
                xv.cols()
            )));
        }
        let mut y = Tensor::zeros(xv.rows(), 1);
        for (r, &c) in cols.iter().enumerate() {
            y.set(r, 0, xv.get(r, c));
        }
        Ok(self.push(Op::GatherCols { x, cols }, y))
    }

    /// Mean squared error between two equally shaped nodes: per-row squared
    /// L2 distance averaged over rows. A composite, not a primitive.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NnResult<NodeId> {
        let diff = self.sub(a, b)?;
        let per_row = self.row_sum_sq(diff);
        Ok(self.mean_all(per_row))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// parameter inserted with [`Tape::param`]; constants get none.
    pub fn backward(&self, loss: NodeId) -> NnResult<GradMap> {
        let shape = self.nodes[loss].value.shape();
        if shape != (1, 1) {
            return Err(NnError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(_) => {
                    // Re-park the gradient for collection below.
                    grads[id] = Some(dy);
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    accumulate(&mut grads, *x, dy.matmul_nn(wv));
                    accumulate(&mut grads, *w, dy.matmul_tn(xv));
                    accumulate(&mut grads, *b, dy.col_sum());
                }
                Op::Elu(x) => {
                    // d/dx elu(x) = 1 for x > 0, else elu(x) + 1.
                    let dx = self.nodes[id].value.zip_map(&dy, |y, g| {
                        if y > 0.0 {
                            g
                        } else {
                            g * (y + 1.0)
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = self.nodes[id].value.zip_map(&dy, |y, g| g * (1.0 - y * y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, dy.map(|g| c * g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.map(|g| -g));
                }
                Op::ConcatCols(a, b) => {
                    let a_cols = self.nodes[*a].value.cols();
                    let b_cols = self.nodes[*b].value.cols();
                    let mut da = Tensor::zeros(dy.rows(), a_cols);
                    let mut db = Tensor::zeros(dy.rows(), b_cols);
                    for r in 0..dy.rows() {
                        let row = dy.row(r);
                        da.row_mut(r).copy_from_slice(&row[..a_cols]);
                        db.row_mut(r).copy_from_slice(&row[a_cols..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::RowSumSq(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let g = 2.0 * dy.get(r, 0);
                        let src = xv.row(r);
                        let dst = dx.row_mut(r);
                        for (d, v) in dst.iter_mut().zip(src.iter()) {
                            *d = g * v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let xv = &self.nodes[*x].value;
                    let g = dy.get(0, 0) / xv.len() as f64;
                    accumulate(&mut grads, *x, Tensor::full(xv.rows(), xv.cols(), g));
                }
                Op::Clip { x, lo, hi } => {
                    let dx = self.nodes[*x].value.zip_map(&dy, |v, g| {
                        if v >= *lo && v <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    // dx = dy - softmax(x) * rowsum(dy)
                    let y = &self.nodes[id].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let row_sum: f64 = dy.row(r).iter().sum();
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let dst = dx.row_mut(r);
                        for c in 0..yr.len() {
                            dst[c] = gr[c] - yr[c].exp() * row_sum;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherCols { x, cols } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        dx.set(r, c, dy.get(r, 0));
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }

        let mut out = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = grads[id].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
