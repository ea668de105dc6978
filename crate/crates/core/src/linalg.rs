//! Row-major f32 matrices and the handful of kernels the forward pass needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major `rows × cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(alloc::format!(
                "matrix data has {} elements, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Input("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(1.0, self.view(), rhs.view(), 0.0, out.view_mut());
        out
    }

    /// `self · rhsᵀ` where `rhs` is `n × k`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm(1.0, self.view(), rhs.view().t(), 0.0, out.view_mut());
        out
    }

    /// `selfᵀ · rhs` where `self` is `k × m`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm(1.0, self.view().t(), rhs.view(), 0.0, out.view_mut());
        out
    }

    pub fn add_row_vector(&mut self, v: &[f32]) {
        assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += *b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub(crate) fn view(&self) -> View<'_> {
        View { data: &self.data, rows: self.rows, cols: self.cols, rs: self.cols, cs: 1 }
    }

    pub(crate) fn view_mut(&mut self) -> ViewMut<'_> {
        let (rows, cols) = (self.rows, self.cols);
        ViewMut { data: &mut self.data, rows, cols, rs: cols, cs: 1 }
    }
}

/// Strided read-only view used to feed the GEMM backend without copies.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, rows, cols, rs, cs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `c ← alpha · a · b + beta · c`.
pub(crate) fn gemm(alpha: f32, a: View<'_>, b: View<'_>, beta: f32, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(a.rows, c.rows);
    assert_eq!(b.cols, c.cols);
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: the three views were bounds-checked above against their strides
    // and extents, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// GPT-2's tanh-approximated GELU ("gelu_new").
#[inline]
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + libm::tanhf(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    let u = SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x);
    let t = libm::tanhf(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Per-row layer normalisation, biased variance.
pub fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / libm::sqrtf(var + eps);
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
    }
}

pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        layer_norm_row(x.row(r), gamma, beta, eps, out.row_mut(r));
    }
    out
}

/// Backward pass of [`layer_norm_row`] with respect to its input.
///
/// `grad_out` is the gradient with respect to the normalised output.
pub fn layer_norm_row_backward(x: &[f32], gamma: &[f32], eps: f32, grad_out: &[f32], grad_in: &mut [f32]) {
    let n = x.len();
    let nf = n as f32;
    let mean = x.iter().sum::<f32>() / nf;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / nf;
    let inv = 1.0 / libm::sqrtf(var + eps);
    let mut mean_g = 0.0f32;
    let mut mean_gx = 0.0f32;
    for i in 0..n {
        let g = grad_out[i] * gamma[i];
        let xhat = (x[i] - mean) * inv;
        mean_g += g;
        mean_gx += g * xhat;
    }
    mean_g /= nf;
    mean_gx /= nf;
    for i in 0..n {
        let g = grad_out[i] * gamma[i];
        let xhat = (x[i] - mean) * inv;
        grad_in[i] = inv * (g - mean_g - xhat * mean_gx);
    }
}

/// In-place numerically stable softmax.
pub fn softmax_inplace(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f32]) -> f32 {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f32 = v.iter().map(|x| libm::expf(x - max)).sum();
    max + libm::logf(sum)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f32 {
    libm::sqrtf(dot(a, a))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return if aa == bb { 1.0 } else { 0.0 };
    }
    ab / libm::sqrt(aa * bb)
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// 1-based rank of `target` in `scores` (rank 1 = argmax, ties broken by
/// ascending index).
pub fn rank_of(scores: &[f32], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|(j, s)| **s > t || (**s == t && *j < target))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn filled(rows: usize, cols: usize, seed: u32) -> Matrix {
        let data = (0..rows * cols).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_variants_agree_with_naive_product() {
        let a = filled(7, 5, 1);
        let b = filled(5, 3, 2);
        let want = naive(&a, &b);
        let got = a.matmul(&b);
        for (x, y) in want.as_slice().iter().zip(got.as_slice()) {
            assert!((x - y).abs() < 1e-5);
        }
        let got_t = a.matmul_t(&b.transpose());
        for (x, y) in want.as_slice().iter().zip(got_t.as_slice()) {
            assert!((x - y).abs() < 1e-5);
        }
        let got_tm = a.transpose().t_matmul(&b);
        for (x, y) in want.as_slice().iter().zip(got_tm.as_slice()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu_new(1.0) = 0.8411920071
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-6);
        assert!((gelu(-3.0) - -0.003_637_4).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f32, -1.0, -0.2, 0.0, 0.3, 1.7] {
            let h = 1e-3f64;
            let f = |v: f64| {
                let c = (2.0 / core::f64::consts::PI).sqrt();
                0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
            };
            let fd = (f(x as f64 + h) - f(x as f64 - h)) / (2.0 * h);
            assert!((gelu_grad(x) as f64 - fd).abs() < 1e-4, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = [0.3f32, -1.2, 2.5, 0.1, -0.7];
        let gamma = [1.0f32, 0.5, 2.0, -1.0, 1.5];
        let beta = [0.0f32; 5];
        let upstream = [0.2f32, -0.4, 1.0, 0.3, -0.1];
        let mut grad = [0.0f32; 5];
        layer_norm_row_backward(&x, &gamma, 1e-5, &upstream, &mut grad);
        for i in 0..5 {
            let loss = |xs: &[f32]| {
                let mut o = [0.0f32; 5];
                layer_norm_row(xs, &gamma, &beta, 1e-5, &mut o);
                o.iter().zip(&upstream).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
            };
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-3;
            xm[i] -= 1e-3;
            let fd = (loss(&xp) - loss(&xm)) / 2e-3;
            assert!((grad[i] as f64 - fd).abs() < 2e-3, "i={i} analytic={} fd={fd}", grad[i]);
        }
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        let s = [1.0f32, 3.0, 3.0, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 2), 2);
        assert_eq!(rank_of(&s, 0), 3);
        assert_eq!(argmax(&s), 1);
    }
}
