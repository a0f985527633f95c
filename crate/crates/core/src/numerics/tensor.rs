//! Dense row-major `f64` arrays.

use std::fmt;

use crate::error::{Error, Result};

/// A dense, row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a numeric error naming `what` if any value is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} produced {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `out[r, o] = sum_i x[r, i] * w[o, i]` for row-major `x: [rows, inner]`, `w: [out, inner]`.
pub(crate) fn matmul_nt(x: &[f64], w: &[f64], rows: usize, inner: usize, out: usize) -> Vec<f64> {
    // 4×2 output tiles; every entry is summed as in `dot2`, so tiles and edges agree bit for bit
    let mut y = vec![0.0; rows * out];
    let (r4, o2) = (rows - rows % 4, out - out % 2);
    for r in (0..r4).step_by(4) {
        let xs = [
            &x[r * inner..(r + 1) * inner],
            &x[(r + 1) * inner..(r + 2) * inner],
            &x[(r + 2) * inner..(r + 3) * inner],
            &x[(r + 3) * inner..(r + 4) * inner],
        ];
        for o in (0..o2).step_by(2) {
            let t = tile_4x2(xs, &w[o * inner..(o + 1) * inner], &w[(o + 1) * inner..(o + 2) * inner]);
            for (j, tr) in t.iter().enumerate() {
                y[(r + j) * out + o] = tr[0];
                y[(r + j) * out + o + 1] = tr[1];
            }
        }
        for o in o2..out {
            for (j, xr) in xs.iter().enumerate() {
                y[(r + j) * out + o] = dot2(xr, &w[o * inner..(o + 1) * inner]);
            }
        }
    }
    for r in r4..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        for (o, wr) in w.chunks_exact(inner).enumerate() {
            y[r * out + o] = dot2(xr, wr);
        }
    }
    y
}

/// Dot product with even and odd terms summed apart, then the odd tail.
#[inline]
fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut e, mut o) = (0.0, 0.0);
    let mut ac = a.chunks_exact(2);
    let mut bc = b.chunks_exact(2);
    for (p, q) in (&mut ac).zip(&mut bc) {
        e += p[0] * q[0];
        o += p[1] * q[1];
    }
    let mut s = e + o;
    if let (Some(p), Some(q)) = (ac.remainder().first(), bc.remainder().first()) {
        s += p * q;
    }
    s
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn tile_4x2(xs: [&[f64]; 4], w0: &[f64], w1: &[f64]) -> [[f64; 2]; 4] {
    use std::arch::x86_64::*;
    let n = w0.len();
    assert!(xs.iter().all(|x| x.len() == n) && w1.len() == n);
    // SAFETY: SSE2 is part of the x86_64 baseline; every load reads k, k+1 < n, checked above
    let mut t = unsafe {
        // lane 0 sums even k, lane 1 odd k, as in `dot2`
        let z = _mm_setzero_pd();
        let (mut c00, mut c01, mut c10, mut c11) = (z, z, z, z);
        let (mut c20, mut c21, mut c30, mut c31) = (z, z, z, z);
        let (p0, p1, p2, p3) = (xs[0].as_ptr(), xs[1].as_ptr(), xs[2].as_ptr(), xs[3].as_ptr());
        let (q0, q1) = (w0.as_ptr(), w1.as_ptr());
        let mut k = 0;
        while k + 2 <= n {
            let a0 = _mm_loadu_pd(q0.add(k));
            let a1 = _mm_loadu_pd(q1.add(k));
            let x0 = _mm_loadu_pd(p0.add(k));
            c00 = _mm_add_pd(c00, _mm_mul_pd(x0, a0));
            c01 = _mm_add_pd(c01, _mm_mul_pd(x0, a1));
            let x1 = _mm_loadu_pd(p1.add(k));
            c10 = _mm_add_pd(c10, _mm_mul_pd(x1, a0));
            c11 = _mm_add_pd(c11, _mm_mul_pd(x1, a1));
            let x2 = _mm_loadu_pd(p2.add(k));
            c20 = _mm_add_pd(c20, _mm_mul_pd(x2, a0));
            c21 = _mm_add_pd(c21, _mm_mul_pd(x2, a1));
            let x3 = _mm_loadu_pd(p3.add(k));
            c30 = _mm_add_pd(c30, _mm_mul_pd(x3, a0));
            c31 = _mm_add_pd(c31, _mm_mul_pd(x3, a1));
            k += 2;
        }
        let fold = |v: __m128d| {
            let mut lanes = [0.0; 2];
            _mm_storeu_pd(lanes.as_mut_ptr(), v);
            lanes[0] + lanes[1]
        };
        [
            [fold(c00), fold(c01)],
            [fold(c10), fold(c11)],
            [fold(c20), fold(c21)],
            [fold(c30), fold(c31)],
        ]
    };
    if n % 2 == 1 {
        for j in 0..4 {
            t[j][0] += xs[j][n - 1] * w0[n - 1];
            t[j][1] += xs[j][n - 1] * w1[n - 1];
        }
    }
    t
}

#[cfg(not(target_arch = "x86_64"))]
#[inline]
fn tile_4x2(xs: [&[f64]; 4], w0: &[f64], w1: &[f64]) -> [[f64; 2]; 4] {
    let mut t = [[0.0; 2]; 4];
    for j in 0..4 {
        t[j] = [dot2(xs[j], w0), dot2(xs[j], w1)];
    }
    t
}

/// `dx[r, i] = sum_o gy[r, o] * w[o, i]`.
pub(crate) fn matmul_nn(gy: &[f64], w: &[f64], rows: usize, out: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * inner];
    for (gr, dr) in gy.chunks_exact(out).zip(dx.chunks_exact_mut(inner)) {
        for (&g, wr) in gr.iter().zip(w.chunks_exact(inner)) {
            if g != 0.0 {
                axpy(g, wr, dr);
            }
        }
    }
    dx
}

/// `dw[o, i] = sum_r gy[r, o] * x[r, i]`.
pub(crate) fn matmul_tn(gy: &[f64], x: &[f64], rows: usize, out: usize, inner: usize) -> Vec<f64> {
    let mut dw = vec![0.0; out * inner];
    for (gr, xr) in gy.chunks_exact(out).zip(x.chunks_exact(inner)).take(rows) {
        for (&g, dwr) in gr.iter().zip(dw.chunks_exact_mut(inner)) {
            if g != 0.0 {
                axpy(g, xr, dwr);
            }
        }
    }
    dw
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators; summation order is fixed so results are reproducible
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn multi_index_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn matmul_kernels_agree_with_naive_loops() {
        let (rows, inner, out) = (3, 5, 4);
        let x: Vec<f64> = (0..rows * inner).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..out * inner).map(|i| (i as f64 * 0.11).cos()).collect();
        let gy: Vec<f64> = (0..rows * out).map(|i| i as f64 - 4.0).collect();
        let y = matmul_nt(&x, &w, rows, inner, out);
        let dx = matmul_nn(&gy, &w, rows, out, inner);
        let dw = matmul_tn(&gy, &x, rows, out, inner);
        for r in 0..rows {
            for o in 0..out {
                let s: f64 = (0..inner).map(|i| x[r * inner + i] * w[o * inner + i]).sum();
                assert!((y[r * out + o] - s).abs() < 1e-12);
            }
            for i in 0..inner {
                let s: f64 = (0..out).map(|o| gy[r * out + o] * w[o * inner + i]).sum();
                assert!((dx[r * inner + i] - s).abs() < 1e-12);
            }
        }
        for o in 0..out {
            for i in 0..inner {
                let s: f64 = (0..rows).map(|r| gy[r * out + o] * x[r * inner + i]).sum();
                assert!((dw[o * inner + i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiled_matmul_matches_dot_on_every_edge() {
        for (rows, inner, out) in [(4, 6, 2), (9, 7, 5), (8, 1, 3), (5, 16, 9)] {
            let x: Vec<f64> = (0..rows * inner).map(|i| (i as f64 * 0.61).sin()).collect();
            let w: Vec<f64> = (0..out * inner).map(|i| (i as f64 * 0.29).cos()).collect();
            let y = matmul_nt(&x, &w, rows, inner, out);
            for r in 0..rows {
                for o in 0..out {
                    let d = dot2(&x[r * inner..(r + 1) * inner], &w[o * inner..(o + 1) * inner]);
                    assert_eq!(y[r * out + o].to_bits(), d.to_bits(), "{rows}x{inner}x{out} at ({r}, {o})");
                    let s: f64 = (0..inner).map(|i| x[r * inner + i] * w[o * inner + i]).sum();
                    assert!((d - s).abs() < 1e-12);
                }
            }
        }
    }
}
