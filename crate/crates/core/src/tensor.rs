//! Dense row-major matrices and the handful of kernels the encoder needs.

use crate::scalar::Scalar;

/// A row-major `rows × cols` matrix. Vectors are `1 × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: S) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    /// Gather rows by index into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm_acc(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        out
    }

    /// `self · rhsᵀ`
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_nt inner dimension mismatch");
        let rt = rhs.transpose();
        let mut out = Self::zeros(self.rows, rhs.rows);
        gemm_acc(&self.data, &rt.data, &mut out.data, self.rows, self.cols, rhs.rows);
        out
    }

    /// `selfᵀ · rhs`
    pub fn matmul_tn(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "matmul_tn inner dimension mismatch");
        let mut out = Self::zeros(self.cols, rhs.cols);
        gemm_tn_acc(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        out
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
///
/// The inner loop is an axpy over a contiguous row so it vectorizes; the
/// accumulation order is fixed, which keeps results bit-reproducible.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (arow, orow) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)).take(m) {
        if k == 0 {
            break;
        }
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
