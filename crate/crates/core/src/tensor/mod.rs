//! Dense row-major matrices over `f64` and the kernels the model is built from.
//!
//! Every value in the crate is an `f64`; there is no generic scalar parameter.
//! The reverse-mode tape in [`tape`] records the same kernels defined here, so
//! a forward value computed on the tape is bit-identical to the value computed
//! by calling the kernel directly.

pub mod tape;

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

/// Norm guard added to each vector norm in cosine similarities and to the
/// column norm in hinge normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Variance guard for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn select_rows(&self, ids: &[usize]) -> Result<Mat> {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            if i >= self.rows {
                return Err(Error::Input(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Mat {
            rows: ids.len(),
            cols: self.cols,
            data,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_same(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Ok(Mat {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &x) in a_row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Ok(Mat {
        rows: m,
        cols: n,
        data: out,
    })
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity with [`NORM_EPS`] added to each norm; a zero vector
/// yields 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: (1, u.len()),
            rhs: (1, v.len()),
        });
    }
    Ok(dot(u, v) / ((norm(u) + NORM_EPS) * (norm(v) + NORM_EPS)))
}

/// Row-wise softmax of `scale * x`, stabilized by subtracting the row max.
pub fn softmax_rows(x: &Mat, scale: f64) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let src = x.row(r);
        let dst = out.row_mut(r);
        let max = src
            .iter()
            .map(|&v| scale * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (scale * s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Rows of `x` divided by `norm + NORM_EPS`, returned with the raw norms.
pub(crate) fn normalize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let n = norm(x.row(r));
        norms.push(n);
        let denom = n + NORM_EPS;
        for v in out.row_mut(r) {
            *v /= denom;
        }
    }
    (out, norms)
}

/// Pullback of [`normalize_rows`]: given the upstream gradient on the
/// normalized rows, return the gradient on the raw rows.
pub(crate) fn normalize_rows_backward(x: &Mat, norms: &[f64], grad: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let n = norms[r];
        let denom = n + NORM_EPS;
        let xr = x.row(r);
        let gr = grad.row(r);
        let o = out.row_mut(r);
        // the norm is not differentiable at the origin; take the zero subgradient there
        let radial = if n > 0.0 {
            dot(xr, gr) / (n * denom * denom)
        } else {
            0.0
        };
        for ((o, &g), &x) in o.iter_mut().zip(gr).zip(xr) {
            *o = g / denom - x * radial;
        }
    }
    out
}

/// All pairwise cosines between the rows of `a` (n×d) and `b` (m×d), n×m.
pub fn cosine_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "cosine_matrix",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (an, _) = normalize_rows(a);
    let (bn, _) = normalize_rows(b);
    matmul_nt(&an, &bn)
}

/// Cosine between row `i` of `a` and row `i` of `b`, as an n×1 column.
pub fn row_cosine(a: &Mat, b: &Mat) -> Result<Mat> {
    check_same("row_cosine", a, b)?;
    let (an, _) = normalize_rows(a);
    let (bn, _) = normalize_rows(b);
    Ok(Mat::from_fn(a.rows, 1, |r, _| dot(an.row(r), bn.row(r))))
}

/// Hinge each entry at zero, then divide every column by its L2 norm
/// (plus `eps` under the square root). Columns with no positive entry
/// become all zero.
pub fn hinge_col_normalize(s: &Mat, eps: f64) -> Mat {
    let norms = hinge_col_norms(s, eps);
    Mat::from_fn(s.rows, s.cols, |r, c| s.get(r, c).max(0.0) / norms[c])
}

fn hinge_col_norms(s: &Mat, eps: f64) -> Vec<f64> {
    let mut sq = vec![0.0; s.cols];
    for r in 0..s.rows {
        for (acc, &v) in sq.iter_mut().zip(s.row(r)) {
            let h = v.max(0.0);
            *acc += h * h;
        }
    }
    sq.into_iter().map(|v| (v + eps).sqrt()).collect()
}

pub(crate) fn hinge_col_normalize_backward(s: &Mat, eps: f64, grad: &Mat) -> Mat {
    let norms = hinge_col_norms(s, eps);
    // Σ_k g_k h_k per column
    let mut gh = vec![0.0; s.cols];
    for r in 0..s.rows {
        for c in 0..s.cols {
            gh[c] += grad.get(r, c) * s.get(r, c).max(0.0);
        }
    }
    Mat::from_fn(s.rows, s.cols, |r, c| {
        let v = s.get(r, c);
        if v > 0.0 {
            let n = norms[c];
            grad.get(r, c) / n - v * gh[c] / (n * n * n)
        } else {
            0.0
        }
    })
}

/// Per-row layer normalization with a 1×d gain and bias.
pub fn layer_norm_rows(x: &Mat, gamma: &Mat, beta: &Mat, eps: f64) -> Result<Mat> {
    if gamma.shape() != (1, x.cols) {
        return Err(Error::Shape {
            op: "layer_norm gamma",
            lhs: x.shape(),
            rhs: gamma.shape(),
        });
    }
    check_same("layer_norm gain/bias", gamma, beta)?;
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let (mean, inv_std) = row_moments(x.row(r), eps);
        let o = out.row_mut(r);
        for (c, (o, &v)) in o.iter_mut().zip(x.row(r)).enumerate() {
            *o = (v - mean) * inv_std * gamma.data[c] + beta.data[c];
        }
    }
    Ok(out)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(x: &Mat, gamma: &Mat, eps: f64, grad: &Mat) -> (Mat, Mat, Mat) {
    let d = x.cols;
    let mut dx = Mat::zeros(x.rows, d);
    let mut dgamma = Mat::zeros(1, d);
    let mut dbeta = Mat::zeros(1, d);
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..x.rows {
        let (mean, inv_std) = row_moments(x.row(r), eps);
        let g = grad.row(r);
        for c in 0..d {
            xhat[c] = (x.get(r, c) - mean) * inv_std;
            dxhat[c] = g[c] * gamma.data[c];
            dgamma.data[c] += g[c] * xhat[c];
            dbeta.data[c] += g[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, &xhat) / d as f64;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = Mat::from_rows(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, -1.0]]).unwrap();
        assert_eq!(matmul(&Mat::identity(2), &x).unwrap(), x);

        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_mat(&mut rng, 5, 4);
        let b = random_mat(&mut rng, 4, 3);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                assert!((got.get(i, j) - acc).abs() <= 1e-6);
            }
        }
        let nt = matmul_nt(&a, &random_mat(&mut rng, 6, 4)).unwrap();
        assert_eq!(nt.shape(), (5, 6));
        let tn = matmul_tn(&a, &random_mat(&mut rng, 5, 2)).unwrap();
        assert_eq!(tn.shape(), (4, 2));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::Shape {
                lhs: (2, 3),
                rhs: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax_rows(&Mat::zeros(1, 3), 5.0);
        for &v in uniform.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let zero_scale = softmax_rows(&Mat::from_rows(&[vec![4.0, -1.0, 7.0]]).unwrap(), 0.0);
        for &v in zero_scale.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let sharp = softmax_rows(&Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(), 20.0);
        let tail = 1.0 / (1.0 + 20.0_f64.exp());
        assert!((sharp.get(0, 1) - tail).abs() < 1e-15);
        assert!((sharp.get(0, 1) - 2.06e-9).abs() < 1e-11);
        assert!((sharp.get(0, 0) - (1.0 - tail)).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_entries() {
        let x = Mat::from_rows(&[vec![1e4, -1e4, 5e3], vec![-1e4, -1e4, -1e4]]).unwrap();
        let y = softmax_rows(&x, 1.0);
        assert!(y.is_finite());
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-6);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_matrix_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat(&mut rng, 4, 3);
        let b = random_mat(&mut rng, 5, 3);
        let m = cosine_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let c = cosine(a.row(i), b.row(j)).unwrap();
                assert!((m.get(i, j) - c).abs() <= 1e-12);
            }
        }
        let rc = row_cosine(&a, &a).unwrap();
        for v in rc.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hinge_normalize_examples() {
        let col = |a: f64, b: f64| Mat::from_rows(&[vec![a], vec![b]]).unwrap();
        let y = hinge_col_normalize(&col(3.0, 4.0), NORM_EPS);
        assert!((y.get(0, 0) - 0.6).abs() < 1e-9 && (y.get(1, 0) - 0.8).abs() < 1e-9);
        let y = hinge_col_normalize(&col(-1.0, -2.0), NORM_EPS);
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = hinge_col_normalize(&col(1.0, -1.0), NORM_EPS);
        assert!((y.get(0, 0) - 1.0).abs() < 1e-8 && y.get(1, 0) == 0.0);
    }

    #[test]
    fn layer_norm_of_zero_rows_is_finite() {
        let x = Mat::zeros(3, 4);
        let y = layer_norm_rows(
            &x,
            &Mat::filled(1, 4, 1.0),
            &Mat::zeros(1, 4),
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert!(y.is_finite());
        assert_eq!(y.max_abs(), 0.0);
    }
}
