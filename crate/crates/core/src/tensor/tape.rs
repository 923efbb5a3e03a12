//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Each
//! primitive stores its output value and the indices of its inputs; the
//! backward sweep walks the tape in reverse and accumulates gradients
//! additively. A fresh tape is built for every forward pass.
//!
//! Leaves created with `requires_grad = false` (frozen parameters, data) are
//! constants: nothing downstream of only constants is differentiated.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{
    cosine_matrix, gelu, gelu_grad, hinge_col_normalize, hinge_col_normalize_backward,
    layer_norm_backward, layer_norm_rows, matmul, matmul_nt, matmul_tn, normalize_rows,
    normalize_rows_backward, row_cosine, sigmoid, softmax_rows, Mat,
};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize, f64),
    CosineMatrix(usize, usize),
    RowCosine(usize, usize),
    HingeColNormalize(usize, f64),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Sum(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "value {} was not recorded on tape {}",
                v.idx, self.id
            )));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn unary(&mut self, x: Var, value: Mat, op: Op) -> Var {
        let rg = self.nodes[x.idx].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let rg = self.nodes[a.idx].requires_grad || self.nodes[b.idx].requires_grad;
        self.push(value, op, rg)
    }

    /// Sign of every input entry to a hinge (relu and hinge normalization),
    /// in recording order. Two passes with equal patterns lie on the same
    /// smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::HingeColNormalize(x, _) = node.op {
                out.extend(self.nodes[x].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Records an input. Gradients flow to it only if `requires_grad`.
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.idx].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = matmul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.binary(a, b, value, Op::MatMul(ai, bi)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = matmul_nt(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.binary(a, b, value, Op::MatMulNt(ai, bi)))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Mat)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: name,
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Ok((ai, bi, Mat::new(x.rows(), x.cols(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.elementwise("add", a, b, |p, q| p + q)?;
        Ok(self.binary(a, b, value, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.elementwise("sub", a, b, |p, q| p - q)?;
        Ok(self.binary(a, b, value, Op::Sub(ai, bi)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.elementwise("mul", a, b, |p, q| p * q)?;
        Ok(self.binary(a, b, value, Op::Mul(ai, bi)))
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xi, ri) = (self.check(x)?, self.check(row)?);
        let (xm, rm) = (&self.nodes[xi].value, &self.nodes[ri].value);
        if rm.shape() != (1, xm.cols()) {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xm.shape(),
                rhs: rm.shape(),
            });
        }
        let value = Mat::from_fn(xm.rows(), xm.cols(), |r, c| xm.get(r, c) + rm.get(0, c));
        Ok(self.binary(x, row, value, Op::AddRow(xi, ri)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v * factor);
        Ok(self.unary(x, value, Op::Scale(xi, factor)))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v + offset);
        Ok(self.unary(x, value, Op::AddScalar(xi)))
    }

    /// `max(x, 0)`; the subgradient at exactly zero is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v.max(0.0));
        Ok(self.unary(x, value, Op::Relu(xi)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(gelu);
        Ok(self.unary(x, value, Op::Gelu(xi)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(sigmoid);
        Ok(self.unary(x, value, Op::Sigmoid(xi)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(f64::tanh);
        Ok(self.unary(x, value, Op::Tanh(xi)))
    }

    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = softmax_rows(&self.nodes[xi].value, scale);
        Ok(self.unary(x, value, Op::SoftmaxRows(xi, scale)))
    }

    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = cosine_matrix(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.binary(a, b, value, Op::CosineMatrix(ai, bi)))
    }

    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = row_cosine(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.binary(a, b, value, Op::RowCosine(ai, bi)))
    }

    pub fn hinge_col_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = hinge_col_normalize(&self.nodes[xi].value, eps);
        Ok(self.unary(x, value, Op::HingeColNormalize(xi, eps)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let value = layer_norm_rows(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
            eps,
        )?;
        let rg = [xi, gi, bi].iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                eps,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = Mat::scalar(self.nodes[xi].value.sum());
        Ok(self.unary(x, value, Op::Sum(xi)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let m = &self.nodes[xi].value;
        if start + len > m.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: m.shape(),
                rhs: (start, len),
            });
        }
        let value = Mat::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        Ok(self.unary(x, value, Op::SliceCols { x: xi, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.nodes[*idx
            .first()
            .ok_or_else(|| Error::Input("empty concat".into()))?]
        .value
        .rows();
        let mut cols = 0;
        for &i in &idx {
            let m = &self.nodes[i].value;
            if m.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: m.shape(),
                });
            }
            cols += m.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Mat::new(rows, cols, data)?, Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let cols = self.nodes[*idx
            .first()
            .ok_or_else(|| Error::Input("empty concat".into()))?]
        .value
        .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let m = &self.nodes[i].value;
            if m.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: m.shape(),
                });
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Mat::new(rows, cols, data)?, Op::ConcatRows(idx), rg))
    }

    /// Row lookup (embedding tables, token reordering).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let value = self.nodes[ti].value.select_rows(ids)?;
        Ok(self.unary(table, value, Op::GatherRows(ti, ids.to_vec())))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output value).
    pub fn backward(&self, output: Var, seed: Mat) -> Result<Gradients> {
        let out = self.check(output)?;
        if seed.shape() != self.nodes[out].value.shape() {
            return Err(Error::Contract(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[out].value.shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = Vec::new();
        grads.resize_with(out + 1, || None);
        grads[out] = Some(seed);

        for idx in (0..=out).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Convenience for scalar outputs: seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, Mat::scalar(1.0))
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, delta: Mat| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |i: usize| self.nodes[i].requires_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if wants(a) {
                    acc(a, matmul_nt(g, val(b))?);
                }
                if wants(b) {
                    acc(b, matmul_tn(val(a), g)?);
                }
            }
            &Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if wants(a) {
                    acc(a, matmul(g, val(b))?);
                }
                if wants(b) {
                    acc(b, matmul_tn(g, val(a))?);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            &Op::AddRow(x, row) => {
                acc(x, g.clone());
                if wants(row) {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    acc(row, dr);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, zip_map(g, val(b), |g, y| g * y));
                }
                if wants(b) {
                    acc(b, zip_map(g, val(a), |g, x| g * x));
                }
            }
            &Op::Scale(x, f) => acc(x, g.map(|v| v * f)),
            &Op::AddScalar(x) => acc(x, g.clone()),
            &Op::Relu(x) => acc(x, zip_map(g, val(x), |g, x| if x > 0.0 { g } else { 0.0 })),
            &Op::Gelu(x) => acc(x, zip_map(g, val(x), |g, x| g * gelu_grad(x))),
            &Op::Sigmoid(x) => acc(x, zip_map(g, &node.value, |g, y| g * y * (1.0 - y))),
            &Op::Tanh(x) => acc(x, zip_map(g, &node.value, |g, y| g * (1.0 - y * y))),
            &Op::SoftmaxRows(x, scale) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = scale * yr[c] * (gr[c] - inner);
                    }
                }
                acc(x, dx);
            }
            &Op::CosineMatrix(a, b) => {
                let (an, a_norms) = normalize_rows(val(a));
                let (bn, b_norms) = normalize_rows(val(b));
                if wants(a) {
                    let dan = matmul(g, &bn)?;
                    acc(a, normalize_rows_backward(val(a), &a_norms, &dan));
                }
                if wants(b) {
                    let dbn = matmul_tn(g, &an)?;
                    acc(b, normalize_rows_backward(val(b), &b_norms, &dbn));
                }
            }
            &Op::RowCosine(a, b) => {
                let (an, a_norms) = normalize_rows(val(a));
                let (bn, b_norms) = normalize_rows(val(b));
                let per_row =
                    |m: &Mat| Mat::from_fn(m.rows(), m.cols(), |r, c| g.get(r, 0) * m.get(r, c));
                if wants(a) {
                    acc(a, normalize_rows_backward(val(a), &a_norms, &per_row(&bn)));
                }
                if wants(b) {
                    acc(b, normalize_rows_backward(val(b), &b_norms, &per_row(&an)));
                }
            }
            &Op::HingeColNormalize(x, eps) => {
                acc(x, hinge_col_normalize_backward(val(x), eps, g));
            }
            &Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (dx, dgamma, dbeta) = layer_norm_backward(val(x), val(gamma), eps, g);
                acc(x, dx);
                acc(gamma, dgamma);
                acc(beta, dbeta);
            }
            &Op::Sum(x) => {
                let (r, c) = val(x).shape();
                acc(x, Mat::filled(r, c, g.data()[0]));
            }
            &Op::SliceCols { x, start } => {
                if wants(x) {
                    let (r, c) = val(x).shape();
                    let mut dx = Mat::zeros(r, c);
                    for row in 0..r {
                        dx.row_mut(row)[start..start + g.cols()].copy_from_slice(g.row(row));
                    }
                    acc(x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        acc(p, Mat::from_fn(r, c, |i, j| g.get(i, offset + j)));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        acc(p, Mat::from_fn(r, c, |i, j| g.get(offset + i, j)));
                    }
                    offset += r;
                }
            }
            Op::GatherRows(table, ids) => {
                let table = *table;
                if wants(table) {
                    let (r, c) = val(table).shape();
                    let mut dt = Mat::zeros(r, c);
                    for (k, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    acc(table, dt);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_fn(a.rows(), a.cols(), |r, c| f(a.get(r, c), b.get(r, c)))
}

/// Gradients from one backward sweep, indexed by the tape's [`Var`]s.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`; `None` when `v`
    /// does not influence the output or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}
