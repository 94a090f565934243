//! Define-by-run tape.
//!
//! Every op appends a node holding its value and enough context to run its
//! backward rule. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and backward is a single reverse
//! sweep. Gradients accumulate with `+=`.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    MaxPoolRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    L1Rows(Var, Var),
    NnSqDist {
        from: Var,
        to: Var,
        nn: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (for inputs under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape. Frozen parameters enter as
    /// constants. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(m, n, matmul(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of a matrix (the only broadcast).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if !is_matrix(ta) || tb.len() != ta.cols() {
            return Err(mismatch("add_bias", ta, tb));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
            .expect("shape preserved");
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())
            .expect("shape preserved");
        self.push(out, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Selects rows by index. The indices themselves carry no gradient.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(mismatch("gather_rows", ta, ta));
        }
        let (r, c) = (ta.rows(), ta.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Column-wise max over rows, `m x n -> 1 x n`. Ties go to the lowest row,
    /// and backward routes gradient to that same row.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) || ta.rows() == 0 {
            return Err(mismatch("max_pool_rows", ta, ta));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut best = ta.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for (j, &x) in ta.row(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::matrix(1, c, best)?;
        Ok(self.push(out, Op::MaxPoolRows(a, argmax), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.cols() != c {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let r = first.rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.rows() != r {
                return Err(mismatch("concat_cols", first, t));
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(r * total_cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total_cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) || start + len > ta.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: columns {start}..{} of shape {:?}",
                start + len,
                ta.shape()
            )));
        }
        let r = ta.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(mismatch("transpose", ta, ta));
        }
        let out = ta.transposed();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = ta.clone().reshaped(shape);
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ta, tg, tb) = (self.value(a), self.value(gain), self.value(bias));
        let c = ta.cols();
        if !is_matrix(ta) || tg.len() != c || tb.len() != c {
            return Err(mismatch("layer_norm", ta, tg));
        }
        let r = ta.rows();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let m = ta.data().iter().sum::<f64>() / ta.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Per-row L1 distance, `m x n, m x n -> m`.
    pub fn l1_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("l1_rows", ta, tb));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .chunks_exact(c)
            .zip(tb.data().chunks_exact(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::L1Rows(a, b), &[a, b]))
    }

    /// Squared distance from each row of `from` (`m x 3`) to its nearest row
    /// of `to` (`k x 3`), giving an `m` vector. The nearest-neighbor choice is
    /// a discrete selection and carries no gradient.
    pub fn nn_sq_dist(&mut self, from: Var, to: Var) -> Result<Var> {
        let (ta, tb) = (self.value(from), self.value(to));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.cols() || tb.rows() == 0 {
            return Err(mismatch("nn_sq_dist", ta, tb));
        }
        let c = ta.cols();
        let mut nn = Vec::with_capacity(ta.rows());
        let mut dist = Vec::with_capacity(ta.rows());
        for a in ta.data().chunks_exact(c) {
            let mut best = (0usize, f64::INFINITY);
            for (j, b) in tb.data().chunks_exact(c).enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            nn.push(best.0);
            dist.push(best.1);
        }
        Ok(self.push(Tensor::vector(dist), Op::NnSqDist { from, to, nn }, &[from, to]))
    }

    /// Mean squared nearest-neighbor distance from `from` toward `to`.
    pub fn unilateral_chamfer(&mut self, from: Var, to: Var) -> Result<Var> {
        let d = self.nn_sq_dist(from, to)?;
        self.mean(d)
    }

    /// Sum of both unilateral directions.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let ab = self.unilateral_chamfer(a, b)?;
        let ba = self.unilateral_chamfer(b, a)?;
        self.add(ab, ba)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (id, g) in grads.param_grads(self) {
            store.accumulate_grad(id, &g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    acc(*a, like(*a, matmul_nt(g.data(), tb.data(), m, n, k)), grads);
                }
                if wants(*b) {
                    acc(*b, like(*b, matmul_tn(ta.data(), g.data(), m, k, n)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.clone(), grads);
                if wants(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*bias, like(*bias, db), grads);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                if wants(*b) {
                    acc(*b, like(*b, g.data().iter().map(|x| -x).collect()), grads);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    acc(*a, like(*a, d), grads);
                }
                if wants(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, like(*a, g.data().iter().map(|x| x * s).collect()), grads),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 })
                    .collect();
                acc(*a, like(*a, d), grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*a, like(*a, d), grads);
            }
            Op::GatherRows(a, indices) => {
                let c = g.cols();
                let mut d = vec![0.0; val(*a).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[r * c + j];
                    }
                }
                acc(*a, like(*a, d), grads);
            }
            Op::MaxPoolRows(a, argmax) => {
                let c = g.cols();
                let mut d = vec![0.0; val(*a).len()];
                for (j, &i) in argmax.iter().enumerate() {
                    d[i * c + j] += g.data()[j];
                }
                acc(*a, like(*a, d), grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        acc(p, like(p, g.data()[offset..offset + n].to_vec()), grads);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (val(p).rows(), val(p).cols());
                    if wants(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        acc(p, like(p, d), grads);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let total = val(*a).cols();
                let len = g.cols();
                let mut d = vec![0.0; val(*a).len()];
                for i in 0..g.rows() {
                    d[i * total + start..i * total + start + len].copy_from_slice(g.row(i));
                }
                acc(*a, like(*a, d), grads);
            }
            Op::Transpose(a) => acc(*a, like(*a, g.transposed().into_data()), grads),
            Op::Reshape(a) => acc(*a, like(*a, g.data().to_vec()), grads),
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let r = g.rows();
                let tg = val(*gain).data();
                if wants(*input) {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let grow = g.row(i);
                        let hrow = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = grow.iter().zip(tg).map(|(x, w)| x * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(x, h)| x * h).sum();
                        for j in 0..c {
                            d[i * c + j] = inv_std[i] / c as f64
                                * (c as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    acc(*input, like(*input, d), grads);
                }
                if wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(*gain, like(*gain, dg), grads);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g.data()[i * c + j];
                        }
                    }
                    acc(*bias, like(*bias, db), grads);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, like(*a, vec![g.data()[0] / n as f64; n]), grads);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, like(*a, vec![g.data()[0]; n]), grads);
            }
            Op::L1Rows(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let sign: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .enumerate()
                    .map(|(k, (x, y))| {
                        let s = if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        };
                        s * g.data()[k / c]
                    })
                    .collect();
                if wants(*b) {
                    acc(*b, like(*b, sign.iter().map(|x| -x).collect()), grads);
                }
                acc(*a, like(*a, sign), grads);
            }
            Op::NnSqDist { from, to, nn } => {
                let (ta, tb) = (val(*from), val(*to));
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for (i, &j) in nn.iter().enumerate() {
                    for k in 0..c {
                        let diff = 2.0 * (ta.data()[i * c + k] - tb.data()[j * c + k]) * g.data()[i];
                        da[i * c + k] += diff;
                        db[j * c + k] -= diff;
                    }
                }
                acc(*from, like(*from, da), grads);
                acc(*to, like(*to, db), grads);
            }
        }
    }
}

/// Per-node gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter node on `graph`; unreachable ones are zero.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = graph
            .params
            .iter()
            .filter(|(_, v)| graph.requires_grad(**v))
            .map(|(id, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (*id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 5], &[0.3; 5]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_matches_loop() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0, 0.0, -3.0, 1.5];
        let mut g = Graph::new();
        let va = g.constant(t(&[2, 3], &a));
        let vb = g.constant(t(&[3, 2], &b));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 2 + j];
                }
                assert_eq!(g.value(c).data()[i * 2 + j], s);
            }
        }
        let err = g.matmul(va, va).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn value_used_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[3.0, -1.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3, 2], &[1.0, 5.0, 1.0, 2.0, 0.0, 5.0]));
        let p = g.max_pool_rows(x).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 5.0]);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.variable(t(&[2], &[0.5, 0.5]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn nn_sq_dist_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let b = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let d = g.unilateral_chamfer(a, b).unwrap();
        assert_eq!(g.scalar(d), 0.5);
        let cd = g.chamfer(a, b).unwrap();
        assert_eq!(g.scalar(cd), 0.5);
    }
}
