//! Dense 2-D tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and deterministic: reductions use fixed loop order, so
//! repeated runs are bit-identical. Scalars are 1x1 tensors, vectors are 1xC
//! rows. Each primitive records a node on the [`Tape`]; [`Tape::backward`]
//! walks the tape once in reverse and accumulates gradients by summation
//! across fan-out. Every primitive output is checked for NaN/Inf and trips a
//! [`Error::NonFinite`] fault if one appears.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type VarId = usize;

const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    /// Add; rhs may be a 1xC row broadcast over lhs rows.
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Relu(VarId),
    /// Softmax over the last axis (per row).
    Softmax(VarId),
    /// Parameterless layer normalization over the last axis.
    LayerNorm(VarId),
    /// Max over rows (the set axis); records the first-max row per column.
    MaxReduceRows(VarId, Vec<usize>),
    MeanReduceRows(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    /// Log-sum-exp per row, producing an Rx1 column.
    LogSumExp(VarId),
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    GatherRows(VarId, Vec<usize>),
    /// Scatter-add rows of the input into a fresh (n_rows x C) output.
    ScatterAddRows(VarId, Vec<usize>),
    SliceCols(VarId, usize, usize),
    Transpose(VarId),
    /// Smooth-L1 (Huber) elementwise with unit transition point.
    Huber(VarId),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive applications for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Trainable input; [`Tape::backward`] will produce its gradient.
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.push_unchecked(value, true, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn push(&mut self, value: Tensor, parents: &[VarId], op: Op, name: &'static str) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "primitive `{name}` produced a non-finite value"
            )));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn shape_err(&self, op: &'static str, a: VarId, b: VarId) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape(),
            rhs: self.value(b).shape(),
        }
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Tensor::new(m, n, out), &[a, b], Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = tb.rows == 1 && tb.cols == ta.cols;
        if !(broadcast || (ta.rows == tb.rows && ta.cols == tb.cols)) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = ta.data.clone();
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                let bv = if broadcast { tb.data[c] } else { tb.get(r, c) };
                out[r * ta.cols + c] += bv;
            }
        }
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a, b], Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(self.shape_err("sub", a, b));
        }
        let out: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a, b], Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(self.shape_err("multiply", a, b));
        }
        let out: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a, b], Op::Mul(a, b), "multiply")
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data.iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a], Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data.iter().map(|x| x + s).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a], Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data.iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a], Op::Relu(a), "relu")
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows, ta.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        self.push(Tensor::new(r, c, out), &[a], Op::Softmax(a), "softmax")
    }

    pub fn layer_norm(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows, ta.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) / s;
            }
        }
        self.push(Tensor::new(r, c, out), &[a], Op::LayerNorm(a), "layer-normalize")
    }

    /// Max over the set axis (rows). Gradient routes to the first maximal row
    /// per column.
    pub fn max_reduce_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        if ta.rows == 0 {
            return Err(Error::Contract("max-reduce over empty set".into()));
        }
        let (r, c) = (ta.rows, ta.cols);
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = ta.data[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(
            Tensor::new(1, c, out),
            &[a],
            Op::MaxReduceRows(a, arg),
            "max-reduce",
        )
    }

    pub fn mean_reduce_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        if ta.rows == 0 {
            return Err(Error::Contract("mean-reduce over empty set".into()));
        }
        let (r, c) = (ta.rows, ta.cols);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += ta.data[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        self.push(Tensor::new(1, c, out), &[a], Op::MeanReduceRows(a), "mean-reduce")
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::SumAll(a), "sum")
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum::<f64>() / ta.data.len() as f64;
        self.push(Tensor::scalar(s), &[a], Op::MeanAll(a), "mean")
    }

    /// Numerically stable log-sum-exp per row; output is Rx1.
    pub fn log_sum_exp(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows, ta.cols);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            out[i] = mx + s.ln();
        }
        self.push(Tensor::new(r, 1, out), &[a], Op::LogSumExp(a), "log-sum-exp")
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(self.shape_err("concat", parts[0], p));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        self.push(
            Tensor::new(rows, cols, data),
            parts,
            Op::ConcatRows(parts.to_vec()),
            "concat",
        )
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows != rows {
                return Err(self.shape_err("concat", parts[0], p));
            }
            widths.push(t.cols);
            total += t.cols;
        }
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let t = self.value(p);
                let w = widths[pi];
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
                off += w;
            }
        }
        self.push(
            Tensor::new(rows, total, data),
            parts,
            Op::ConcatCols(parts.to_vec()),
            "concat",
        )
    }

    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> Result<VarId> {
        let ta = self.value(a);
        let c = ta.cols;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= ta.rows {
                return Err(Error::Range(format!(
                    "gather index {i} out of range for {} rows",
                    ta.rows
                )));
            }
            data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::new(idx.len(), c, data),
            &[a],
            Op::GatherRows(a, idx.to_vec()),
            "gather-by-index",
        )
    }

    pub fn scatter_add_rows(&mut self, a: VarId, idx: &[usize], n_rows: usize) -> Result<VarId> {
        let ta = self.value(a);
        if idx.len() != ta.rows {
            return Err(Error::Contract(format!(
                "scatter-add: {} indices for {} rows",
                idx.len(),
                ta.rows
            )));
        }
        let c = ta.cols;
        let mut data = vec![0.0; n_rows * c];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(Error::Range(format!(
                    "scatter index {i} out of range for {n_rows} rows"
                )));
            }
            for j in 0..c {
                data[i * c + j] += ta.data[r * c + j];
            }
        }
        self.push(
            Tensor::new(n_rows, c, data),
            &[a],
            Op::ScatterAddRows(a, idx.to_vec()),
            "scatter-add-by-index",
        )
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> Result<VarId> {
        let ta = self.value(a);
        if start >= end || end > ta.cols {
            return Err(Error::Range(format!(
                "slice [{start}, {end}) out of range for {} cols",
                ta.cols
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(ta.rows * w);
        for r in 0..ta.rows {
            data.extend_from_slice(&ta.data[r * ta.cols + start..r * ta.cols + end]);
        }
        self.push(
            Tensor::new(ta.rows, w, data),
            &[a],
            Op::SliceCols(a, start, end),
            "slice",
        )
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows, ta.cols);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data[i * c + j];
            }
        }
        self.push(Tensor::new(c, r, data), &[a], Op::Transpose(a), "transpose")
    }

    /// Elementwise smooth-L1: 0.5 d^2 for |d| <= 1, |d| - 0.5 beyond.
    pub fn huber(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta
            .data
            .iter()
            .map(|&d| {
                if d.abs() <= 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, &[a], Op::Huber(a), "smooth-l1")
    }

    /// Reverse pass from a scalar output. Returns one gradient slot per tape
    /// node; only nodes with `requires_grad` reachable from `out` are filled.
    pub fn backward(&self, out: VarId) -> Result<Grads> {
        let ot = self.value(out);
        if ot.rows != 1 || ot.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got {:?}",
                ot.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(Tensor::scalar(1.0));
        for id in (0..=out).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { slots: grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: VarId, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => grads[id] = Some(g),
        }
    }

    fn accumulate_parents(&self, id: VarId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // dA = G * B^T
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data[i * n + j] * tb.data[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = ta.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g.data[i * n + j];
                        }
                    }
                }
                self.add_grad(grads, *a, Tensor::new(m, k, da));
                self.add_grad(grads, *b, Tensor::new(k, n, db));
            }
            Op::Add(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.add_grad(grads, *a, g.clone());
                if tb.rows == 1 && ta.rows > 1 {
                    let mut db = vec![0.0; tb.cols];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db[c] += g.get(r, c);
                        }
                    }
                    self.add_grad(grads, *b, Tensor::new(1, tb.cols, db));
                } else {
                    self.add_grad(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                self.add_grad(grads, *b, Tensor::new(g.rows, g.cols, neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                self.add_grad(grads, *a, Tensor::new(g.rows, g.cols, da));
                self.add_grad(grads, *b, Tensor::new(g.rows, g.cols, db));
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.data.iter().map(|v| v * s).collect();
                self.add_grad(grads, *a, Tensor::new(g.rows, g.cols, da));
            }
            Op::AddScalar(a) => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, Tensor::new(g.rows, g.cols, da));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let (r, c) = (y.rows, y.cols);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(grads, *a, Tensor::new(r, c, da));
            }
            Op::LayerNorm(a) => {
                let ta = self.value(*a);
                let y = &self.nodes[id].value;
                let (r, c) = (ta.rows, ta.cols);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let row = &ta.data[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    let s = (var + LN_EPS).sqrt();
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let gmean = gr.iter().sum::<f64>() / c as f64;
                    let gydot: f64 =
                        gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i * c + j] = (gr[j] - gmean - yr[j] * gydot) / s;
                    }
                }
                self.add_grad(grads, *a, Tensor::new(r, c, da));
            }
            Op::MaxReduceRows(a, arg) => {
                let ta = self.value(*a);
                let mut da = vec![0.0; ta.rows * ta.cols];
                for j in 0..ta.cols {
                    da[arg[j] * ta.cols + j] = g.data[j];
                }
                self.add_grad(grads, *a, Tensor::new(ta.rows, ta.cols, da));
            }
            Op::MeanReduceRows(a) => {
                let ta = self.value(*a);
                let inv = 1.0 / ta.rows as f64;
                let mut da = vec![0.0; ta.rows * ta.cols];
                for i in 0..ta.rows {
                    for j in 0..ta.cols {
                        da[i * ta.cols + j] = g.data[j] * inv;
                    }
                }
                self.add_grad(grads, *a, Tensor::new(ta.rows, ta.cols, da));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let da = vec![g.item(); ta.rows * ta.cols];
                self.add_grad(grads, *a, Tensor::new(ta.rows, ta.cols, da));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let v = g.item() / (ta.rows * ta.cols) as f64;
                let da = vec![v; ta.rows * ta.cols];
                self.add_grad(grads, *a, Tensor::new(ta.rows, ta.cols, da));
            }
            Op::LogSumExp(a) => {
                let ta = self.value(*a);
                let y = &self.nodes[id].value;
                let (r, c) = (ta.rows, ta.cols);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g.data[i] * (ta.data[i * c + j] - y.data[i]).exp();
                    }
                }
                self.add_grad(grads, *a, Tensor::new(r, c, da));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let take = tp.rows * tp.cols;
                    let slice = g.data[off..off + take].to_vec();
                    self.add_grad(grads, p, Tensor::new(tp.rows, tp.cols, slice));
                    off += take;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let mut dp = vec![0.0; tp.rows * tp.cols];
                    for r in 0..tp.rows {
                        dp[r * tp.cols..(r + 1) * tp.cols].copy_from_slice(
                            &g.data[r * g.cols + off..r * g.cols + off + tp.cols],
                        );
                    }
                    self.add_grad(grads, p, Tensor::new(tp.rows, tp.cols, dp));
                    off += tp.cols;
                }
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols;
                let mut da = vec![0.0; ta.rows * c];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g.data[r * c + j];
                    }
                }
                self.add_grad(grads, *a, Tensor::new(ta.rows, c, da));
            }
            Op::ScatterAddRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols;
                let mut da = vec![0.0; ta.rows * c];
                for (r, &i) in idx.iter().enumerate() {
                    da[r * c..(r + 1) * c].copy_from_slice(&g.data[i * c..(i + 1) * c]);
                }
                self.add_grad(grads, *a, Tensor::new(ta.rows, c, da));
            }
            Op::SliceCols(a, start, _end) => {
                let ta = self.value(*a);
                let mut da = vec![0.0; ta.rows * ta.cols];
                for r in 0..ta.rows {
                    for j in 0..g.cols {
                        da[r * ta.cols + start + j] = g.data[r * g.cols + j];
                    }
                }
                self.add_grad(grads, *a, Tensor::new(ta.rows, ta.cols, da));
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows, ta.cols);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g.data[j * r + i];
                    }
                }
                self.add_grad(grads, *a, Tensor::new(r, c, da));
            }
            Op::Huber(a) => {
                let ta = self.value(*a);
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(gv, dv)| gv * dv.clamp(-1.0, 1.0))
                    .collect();
                self.add_grad(grads, *a, Tensor::new(g.rows, g.cols, da));
            }
        }
    }
}

/// Per-node gradient slots from one backward pass.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a variable; inputs unreachable from the output get exact zero.
    pub fn get(&self, tape: &Tape, id: VarId) -> Tensor {
        match &self.slots[id] {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(id);
                Tensor::zeros(v.rows, v.cols)
            }
        }
    }
}

/// Compare analytic gradients against central finite differences.
/// Returns the max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn grad_check<F>(f: &F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    grad_check_coords(f, params, eps, None)
}

/// [`grad_check`] restricted to a deterministic stride-sampled subset of
/// coordinates (at most `max_coords` per parameter).
pub fn grad_check_sampled<F>(f: &F, params: &[Tensor], eps: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    grad_check_coords(f, params, eps, Some(max_coords))
}

fn grad_check_coords<F>(
    f: &F,
    params: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(&tape, id)).collect();

    let eval = |theta: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<VarId> = theta.iter().map(|p| t.leaf(p.clone())).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut theta: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.data.len();
        let stride = match max_coords {
            Some(m) if n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut k = 0;
        while k < n {
            let orig = theta[pi].data[k];
            theta[pi].data[k] = orig + eps;
            let fp = eval(&theta)?;
            theta[pi].data[k] = orig - eps;
            let fm = eval(&theta)?;
            theta[pi].data[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data[k];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            if rel > worst {
                worst = rel;
            }
            k += stride;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let i = tape.leaf(ident(3));
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch_named() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn max_reduce_idempotent_on_duplicates() {
        let mut tape = Tape::new();
        let v = Tensor::row(&[1.0, -2.0, 3.0]);
        let single = tape.leaf(v.clone());
        let double = tape.leaf(Tensor::new(2, 3, [v.data.clone(), v.data.clone()].concat()));
        let m1 = tape.max_reduce_rows(single).unwrap();
        let m2 = tape.max_reduce_rows(double).unwrap();
        assert_eq!(tape.value(m1).data, tape.value(m2).data);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(&tape, x).item(), 6.0);
    }

    #[test]
    fn backward_unused_input_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let out = tape.scale(x, 1.0).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(&tape, y).item(), 0.0);
        let _ = y;
    }

    #[test]
    fn backward_two_layer_chain_matches_hand_rule() {
        // y = sum(W2 (W1 x)) on a 2x2 instance; dy/dW1 = W2^T 1 x^T etc.
        let w1 = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w2 = Tensor::new(2, 2, vec![0.5, -1.0, 2.0, 1.5]);
        let x = Tensor::new(2, 1, vec![1.0, -1.0]);
        let mut tape = Tape::new();
        let w1v = tape.param(w1.clone());
        let w2v = tape.param(w2.clone());
        let xv = tape.leaf(x.clone());
        let h = tape.matmul(w1v, xv).unwrap();
        let y = tape.matmul(w2v, h).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        // Hand chain rule: dS/dy = [1,1]^T; dS/dh = W2^T 1 = [2.5, 0.5]^T;
        // dS/dW1 = (W2^T 1) x^T; dS/dW2 = 1 h^T with h = W1 x = [-1, -1]^T.
        let dw1 = grads.get(&tape, w1v);
        assert_eq!(dw1.data, vec![2.5, -2.5, 0.5, -0.5]);
        let dw2 = grads.get(&tape, w2v);
        assert_eq!(dw2.data, vec![-1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn backward_nonscalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fanout_accumulation_doubles() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(7.0));
        let single = tape.scale(x, 1.0).unwrap();
        let s1 = tape.sum_all(single).unwrap();
        let g1 = tape.backward(s1).unwrap().get(&tape, x).item();
        let dup = tape.add(x, x).unwrap();
        let s2 = tape.sum_all(dup).unwrap();
        let g2 = tape.backward(s2).unwrap().get(&tape, x).item();
        assert_eq!(g2, 2.0 * g1);
    }

    #[test]
    fn grad_check_quadratic_tight() {
        let f = |tape: &mut Tape, ids: &[VarId]| {
            let sq = tape.mul(ids[0], ids[0])?;
            tape.sum_all(sq)
        };
        let theta = Tensor::row(&[0.3, -1.2, 2.5]);
        let err = grad_check(&f, &[theta], 1e-5).unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn grad_check_through_relu_off_kink() {
        let f = |tape: &mut Tape, ids: &[VarId]| {
            let r = tape.relu(ids[0])?;
            let sq = tape.mul(r, r)?;
            tape.sum_all(sq)
        };
        let theta = Tensor::row(&[0.7, -0.9, 1.4, -0.2]);
        let err = grad_check(&f, &[theta], 1e-5).unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn grad_check_layernorm_softmax_lse() {
        let f = |tape: &mut Tape, ids: &[VarId]| {
            let ln = tape.layer_norm(ids[0])?;
            let sm = tape.softmax(ln)?;
            let lse = tape.log_sum_exp(ids[0])?;
            let s1 = tape.sum_all(sm)?;
            let s2 = tape.sum_all(lse)?;
            let sq = tape.mul(ln, ln)?;
            let s3 = tape.sum_all(sq)?;
            let a = tape.add(s1, s2)?;
            tape.add(a, s3)
        };
        let theta = Tensor::new(2, 3, vec![0.4, -0.8, 1.3, 2.1, 0.05, -1.6]);
        let err = grad_check(&f, &[theta], 1e-6).unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn grad_check_gather_scatter_concat_huber() {
        let f = |tape: &mut Tape, ids: &[VarId]| {
            let g = tape.gather_rows(ids[0], &[1, 0, 1])?;
            let s = tape.scatter_add_rows(g, &[0, 1, 0], 2)?;
            let c = tape.concat_cols(&[s, s])?;
            let h = tape.huber(c)?;
            let t = tape.transpose(h)?;
            let m = tape.max_reduce_rows(t)?;
            let mr = tape.mean_reduce_rows(s)?;
            let s1 = tape.sum_all(m)?;
            let s2 = tape.sum_all(mr)?;
            tape.add(s1, s2)
        };
        let theta = Tensor::new(2, 3, vec![0.4, -1.8, 1.3, 2.1, 0.35, -0.6]);
        let err = grad_check(&f, &[theta], 1e-6).unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn nonfinite_trips_fault() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e308));
        assert!(matches!(
            tape.scale(x, 1e308),
            Err(Error::NonFinite(_))
        ));
    }
}
