//! Reverse-mode automatic differentiation over [`TensorF`] matrices.
//!
//! A [`Tape`] records the forward computation as a flat arena of nodes;
//! `backward` walks it in reverse, accumulating gradients. All model
//! forward passes (training, evaluation, and the verification checks)
//! build their graphs through this one code path.

use crate::error::{Result, VitapesError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorF;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_COEF: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[n, d] + [1, d]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ConcatRows(Var, Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    BroadcastRows(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    MulMask(Var, Arc<TensorF>),
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<usize>>,
    },
    Mse {
        pred: Var,
        target: Arc<TensorF>,
    },
}

struct Node {
    value: Arc<TensorF>,
    op: Op,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<TensorF>>,
}

const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: TensorF, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<TensorF>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf holding an owned input tensor.
    pub fn input(&mut self, t: TensorF) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf sharing a tensor without copying it.
    pub fn shared(&mut self, t: Arc<TensorF>) -> Var {
        self.push_shared(t, Op::Leaf)
    }

    /// Leaf bound to a model parameter; gradients are collected per id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push_shared(Arc::clone(store.value(id)), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &TensorF {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&TensorF> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- op constructors -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Add a `[1, d]` row vector to every row of `[n, d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(VitapesError::Shape(format!(
                "add_row wants [1,{}], got {:?}",
                av.cols(),
                rv.shape()
            )));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.at(i, j) + rv.at(0, j);
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_tanh);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise softmax with max-subtraction for numerical stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(VitapesError::Shape("softmax_rows requires rank-2".into()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(VitapesError::Shape(format!(
                "layer_norm affine params must be [1,{}]",
                d
            )));
        }
        let mut out = TensorF::zeros(vec![xv.rows(), d]);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                out.set(i, j, xhat * gv.at(0, j) + bv.at(0, j));
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = TensorF::concat_rows(&[self.value(a), self.value(b)])?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(VitapesError::Shape(format!(
                "slice_rows {}..{} out of {} rows",
                start,
                start + len,
                x.rows()
            )));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let value = x.gather_rows(&idx)?;
        Ok(self.push(value, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(VitapesError::Shape(format!(
                "slice_cols {}..{} out of {} cols",
                start,
                start + len,
                x.cols()
            )));
        }
        let mut out = TensorF::zeros(vec![x.rows(), len]);
        for i in 0..x.rows() {
            for j in 0..len {
                out.set(i, j, x.at(i, start + j));
            }
        }
        Ok(self.push(out, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(VitapesError::Shape("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(VitapesError::Shape("concat_cols row mismatch".into()));
            }
            width += t.cols();
        }
        let mut out = TensorF::zeros(vec![rows, width]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    out.set(i, off + j, t.at(i, j));
                }
            }
            off += t.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Column means over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || x.rows() == 0 {
            return Err(VitapesError::Shape("mean_rows needs a non-empty matrix".into()));
        }
        let n = x.rows() as f64;
        let mut out = TensorF::zeros(vec![1, x.cols()]);
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let v = out.at(0, j) + x.at(i, j) / n;
                out.set(0, j, v);
            }
        }
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Repeat a `[1, d]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(VitapesError::Shape("broadcast_rows needs [1, d]".into()));
        }
        let idx = vec![0usize; n];
        let value = x.gather_rows(&idx)?;
        Ok(self.push(value, Op::BroadcastRows(a, n)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let value = self.value(a).gather_rows(&idx)?;
        Ok(self.push(value, Op::GatherRows(a, Arc::new(idx))))
    }

    /// Elementwise multiply by a constant mask (not differentiated through).
    pub fn mul_mask(&mut self, a: Var, mask: Arc<TensorF>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != mask.shape() {
            return Err(VitapesError::Shape("mul_mask shape mismatch".into()));
        }
        let mut out = x.clone();
        for (v, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        Ok(self.push(out, Op::MulMask(a, mask)))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against `n` labels.
    /// Returns a `[1, 1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.rows() != labels.len() {
            return Err(VitapesError::Shape(format!(
                "cross_entropy wants one label per row: {:?} vs {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let k = z.cols();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(VitapesError::Data(format!(
                    "label {} out of range for {} classes",
                    y, k
                )));
            }
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = TensorF::new(vec![1, 1], vec![total / labels.len() as f64])?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels),
            },
        ))
    }

    /// Mean squared error against a constant target. Returns `[1, 1]`.
    pub fn mse(&mut self, pred: Var, target: Arc<TensorF>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(VitapesError::Shape(format!(
                "mse shape mismatch: {:?} vs {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if p.is_empty() {
            return Err(VitapesError::Objective("mse over an empty tensor".into()));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = TensorF::new(vec![1, 1], vec![total / n])?;
        Ok(self.push(value, Op::Mse { pred, target }))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on non-scalar tensor");
        t.data()[0]
    }

    // ---- backward --------------------------------------------------------

    fn accumulate(grads: &mut [Option<TensorF>], v: Var, delta: TensorF) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Backpropagate from a `[1, 1]` scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(VitapesError::Shape("backward needs a scalar loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<TensorF>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(TensorF::filled(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = gout.matmul(&self.value(b).transpose())?;
                    let db = self.value(a).transpose().matmul(&gout)?;
                    Self::accumulate(&mut grads, a, da);
                    Self::accumulate(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut grads, a, gout.clone());
                    Self::accumulate(&mut grads, b, gout);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let mut drow = TensorF::zeros(vec![1, gout.cols()]);
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            let v = drow.at(0, c) + gout.at(r, c);
                            drow.set(0, c, v);
                        }
                    }
                    Self::accumulate(&mut grads, a, gout);
                    Self::accumulate(&mut grads, row, drow);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    Self::accumulate(&mut grads, a, gout.scale(c));
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    let x = self.value(a);
                    let mut d = gout;
                    for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv < 0.0 {
                            *g *= slope;
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let x = self.value(a);
                    let mut d = gout;
                    for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *g *= gelu_tanh_grad(xv);
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = Arc::clone(&self.nodes[i].value);
                    let mut d = gout;
                    for r in 0..d.rows() {
                        let dot: f64 = (0..d.cols()).map(|c| d.at(r, c) * y.at(r, c)).sum();
                        for c in 0..d.cols() {
                            let v = (d.at(r, c) - dot) * y.at(r, c);
                            d.set(r, c, v);
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = Arc::clone(&self.nodes[x.0].value);
                    let gv = Arc::clone(&self.nodes[gamma.0].value);
                    let d = xv.cols();
                    let df = d as f64;
                    let mut dx = TensorF::zeros(vec![xv.rows(), d]);
                    let mut dgamma = TensorF::zeros(vec![1, d]);
                    let mut dbeta = TensorF::zeros(vec![1, d]);
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / df;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // xhat and the two row means needed by the LN gradient
                        let mut sum_gdy = 0.0;
                        let mut sum_gdy_xhat = 0.0;
                        let xhat: Vec<f64> = (0..d).map(|c| (row[c] - mean) * inv).collect();
                        for c in 0..d {
                            let gdy = gv.at(0, c) * gout.at(r, c);
                            sum_gdy += gdy;
                            sum_gdy_xhat += gdy * xhat[c];
                            let v = dgamma.at(0, c) + gout.at(r, c) * xhat[c];
                            dgamma.set(0, c, v);
                            let v = dbeta.at(0, c) + gout.at(r, c);
                            dbeta.set(0, c, v);
                        }
                        for c in 0..d {
                            let gdy = gv.at(0, c) * gout.at(r, c);
                            let v = inv * (gdy - sum_gdy / df - xhat[c] * sum_gdy_xhat / df);
                            dx.set(r, c, v);
                        }
                    }
                    Self::accumulate(&mut grads, x, dx);
                    Self::accumulate(&mut grads, gamma, dgamma);
                    Self::accumulate(&mut grads, beta, dbeta);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.value(a).rows();
                    let idx_a: Vec<usize> = (0..na).collect();
                    let idx_b: Vec<usize> = (na..gout.rows()).collect();
                    let da = gout.gather_rows(&idx_a)?;
                    let db = gout.gather_rows(&idx_b)?;
                    Self::accumulate(&mut grads, a, da);
                    Self::accumulate(&mut grads, b, db);
                }
                Op::SliceRows(a, start, _len) => {
                    let (a, start) = (*a, *start);
                    let src = self.value(a);
                    let mut d = TensorF::zeros(vec![src.rows(), src.cols()]);
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            d.set(start + r, c, gout.at(r, c));
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::SliceCols(a, start, _len) => {
                    let (a, start) = (*a, *start);
                    let src = self.value(a);
                    let mut d = TensorF::zeros(vec![src.rows(), src.cols()]);
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            d.set(r, start + c, gout.at(r, c));
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(p).cols();
                        let mut d = TensorF::zeros(vec![gout.rows(), w]);
                        for r in 0..gout.rows() {
                            for c in 0..w {
                                d.set(r, c, gout.at(r, off + c));
                            }
                        }
                        off += w;
                        Self::accumulate(&mut grads, p, d);
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    Self::accumulate(&mut grads, a, gout.transpose());
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let n = self.value(a).rows();
                    let scale = 1.0 / n as f64;
                    let mut d = TensorF::zeros(vec![n, gout.cols()]);
                    for r in 0..n {
                        for c in 0..gout.cols() {
                        d.set(r, c, gout.at(0, c) * scale);
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::BroadcastRows(a, _n) => {
                    let a = *a;
                    let mut d = TensorF::zeros(vec![1, gout.cols()]);
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            let v = d.at(0, c) + gout.at(r, c);
                            d.set(0, c, v);
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = Arc::clone(idx);
                    let src = self.value(a);
                    let mut d = TensorF::zeros(vec![src.rows(), src.cols()]);
                    for (r, &src_row) in idx.iter().enumerate() {
                        for c in 0..gout.cols() {
                            let v = d.at(src_row, c) + gout.at(r, c);
                            d.set(src_row, c, v);
                        }
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::MulMask(a, mask) => {
                    let a = *a;
                    let mask = Arc::clone(mask);
                    let mut d = gout;
                    for (g, m) in d.data_mut().iter_mut().zip(mask.data()) {
                        *g *= m;
                    }
                    Self::accumulate(&mut grads, a, d);
                }
                Op::CrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let labels = Arc::clone(labels);
                    let z = self.value(logits);
                    let scale = gout.data()[0] / labels.len() as f64;
                    let mut d = TensorF::zeros(vec![z.rows(), z.cols()]);
                    for (r, &y) in labels.iter().enumerate() {
                        let row = z.row(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for c in 0..z.cols() {
                            let p = (row[c] - m).exp() / denom;
                            let delta = if c == y { 1.0 } else { 0.0 };
                            d.set(r, c, (p - delta) * scale);
                        }
                    }
                    Self::accumulate(&mut grads, logits, d);
                }
                Op::Mse { pred, target } => {
                    let pred = *pred;
                    let target = Arc::clone(target);
                    let p = self.value(pred);
                    let scale = 2.0 * gout.data()[0] / p.len() as f64;
                    let mut d = TensorF::zeros(p.shape().to_vec());
                    for ((dv, &pv), &tv) in
                        d.data_mut().iter_mut().zip(p.data()).zip(target.data())
                    {
                        *dv = (pv - tv) * scale;
                    }
                    Self::accumulate(&mut grads, pred, d);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Sum gradients per parameter id across all leaves bound to it.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<TensorF>> {
        let mut out: Vec<Option<TensorF>> = (0..store.len()).map(|_| None).collect();
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            let (Some(id), Some(g)) = (node.param, grad) else {
                continue;
            };
            match &mut out[id.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` with respect to every entry of the
    /// tensor fed through `build`, compared against the tape gradient.
    fn check_input_grad<F>(input: TensorF, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let eval = |t: &TensorF| {
            let mut tape = Tape::new();
            let x = tape.input(t.clone());
            let loss = build(&mut tape, x);
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().clone();

        let h = 1e-5;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < tol,
                "entry {}: analytic {} vs numeric {} (rel {})",
                i,
                a,
                numeric,
                rel
            );
        }
    }

    /// Quadratic readout so every test loss is a smooth scalar.
    fn quad_loss(tape: &mut Tape, v: Var) -> Var {
        let t = tape.value(v).clone();
        let target = Arc::new(TensorF::zeros(t.shape().to_vec()));
        tape.mse(v, target).unwrap()
    }

    #[test]
    fn matmul_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = TensorF::randn(vec![3, 4], &mut rng);
        let b = TensorF::randn(vec![4, 2], &mut rng);
        check_input_grad(
            a,
            move |tape, x| {
                let bv = tape.input(b.clone());
                let y = tape.matmul(x, bv).unwrap();
                quad_loss(tape, y)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = TensorF::randn(vec![3, 5], &mut rng);
        check_input_grad(
            a,
            |tape, x| {
                let y = tape.softmax_rows(x).unwrap();
                quad_loss(tape, y)
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = TensorF::randn(vec![4, 6], &mut rng);
        let gamma = TensorF::randn(vec![1, 6], &mut rng);
        let beta = TensorF::randn(vec![1, 6], &mut rng);
        check_input_grad(
            a,
            move |tape, x| {
                let g = tape.input(gamma.clone());
                let b = tape.input(beta.clone());
                let y = tape.layer_norm(x, g, b).unwrap();
                quad_loss(tape, y)
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_affine_grads_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = TensorF::randn(vec![4, 6], &mut rng);
        let gamma = TensorF::randn(vec![1, 6], &mut rng);
        let beta = TensorF::randn(vec![1, 6], &mut rng);
        let a2 = a.clone();
        let beta2 = beta.clone();
        check_input_grad(
            gamma,
            move |tape, g| {
                let x = tape.input(a.clone());
                let b = tape.input(beta.clone());
                let y = tape.layer_norm(x, g, b).unwrap();
                quad_loss(tape, y)
            },
            1e-5,
        );
        check_input_grad(
            beta2,
            move |tape, b| {
                let x = tape.input(a2.clone());
                let g = tape.input(TensorF::filled(vec![1, 6], 0.7));
                let y = tape.layer_norm(x, g, b).unwrap();
                quad_loss(tape, y)
            },
            1e-5,
        );
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = TensorF::randn(vec![3, 3], &mut rng);
        check_input_grad(
            a,
            |tape, x| {
                let y = tape.gelu(x);
                quad_loss(tape, y)
            },
            1e-5,
        );
    }

    #[test]
    fn leaky_relu_grad_away_from_kink() {
        let a = TensorF::new(vec![2, 2], vec![1.5, -2.0, 0.7, -0.3]).unwrap();
        check_input_grad(
            a,
            |tape, x| {
                let y = tape.leaky_relu(x, 0.01);
                quad_loss(tape, y)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.input(TensorF::zeros(vec![1, 4]));
        let loss = tape.cross_entropy(z, vec![2]).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = TensorF::randn(vec![3, 4], &mut rng);
        check_input_grad(
            z,
            |tape, x| tape.cross_entropy(x, vec![0, 3, 1]).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn composite_attention_block_grad() {
        // A miniature attention computation exercising matmul, transpose,
        // scale, softmax, and slicing in one graph.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = TensorF::randn(vec![4, 6], &mut rng);
        let wq = TensorF::randn(vec![6, 3], &mut rng);
        let wk = TensorF::randn(vec![6, 3], &mut rng);
        let wv = TensorF::randn(vec![6, 3], &mut rng);
        check_input_grad(
            x,
            move |tape, xv| {
                let wq = tape.input(wq.clone());
                let wk = tape.input(wk.clone());
                let wv = tape.input(wv.clone());
                let q = tape.matmul(xv, wq).unwrap();
                let k = tape.matmul(xv, wk).unwrap();
                let v = tape.matmul(xv, wv).unwrap();
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt).unwrap();
                let scaled = tape.scale(scores, 1.0 / (3.0f64).sqrt());
                let attn = tape.softmax_rows(scaled).unwrap();
                let ctx = tape.matmul(attn, v).unwrap();
                quad_loss(tape, ctx)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_scatter_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = TensorF::randn(vec![5, 3], &mut rng);
        check_input_grad(
            a,
            |tape, x| {
                let g = tape.gather_rows(x, vec![4, 0, 0, 2]).unwrap();
                quad_loss(tape, g)
            },
            1e-6,
        );
    }

    #[test]
    fn mean_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = TensorF::randn(vec![4, 3], &mut rng);
        check_input_grad(
            a,
            |tape, x| {
                let m = tape.mean_rows(x).unwrap();
                let b = tape.broadcast_rows(m, 5).unwrap();
                quad_loss(tape, b)
            },
            1e-6,
        );
    }

    #[test]
    fn param_grads_sum_across_reuse() {
        // The same parameter used twice must accumulate both contributions.
        let mut store = ParamStore::new();
        let w = store.add("w", TensorF::filled(vec![1, 2], 3.0), true);
        let mut tape = Tape::new();
        let w1 = tape.param(&store, w);
        let w2 = tape.param(&store, w);
        let s = tape.add(w1, w2).unwrap();
        let loss = {
            let target = Arc::new(TensorF::zeros(vec![1, 2]));
            tape.mse(s, target).unwrap()
        };
        tape.backward(loss).unwrap();
        let grads = tape.param_grads(&store);
        let g = grads[0].as_ref().unwrap();
        // d/dw mean((2w)^2) = 4w per entry = 12; two entries averaged: 2*(2w)*2/2 = 12
        for v in g.data() {
            assert!((v - 12.0).abs() < 1e-12, "got {}", v);
        }
    }
}
