//! Dense row-major tensors and the handful of matrix kernels everything
//! else is built from.
//!
//! Determinism contract: every kernel reduces along its contraction axis in
//! a fixed order, and row results depend only on that row's inputs. A
//! one-row call therefore produces bit-identical results to the same row
//! inside a batched call, which is what lets rollout-time and training-time
//! forward passes agree exactly.

use crate::scalar::Scalar;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], data }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing dimension when viewed as a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Widen to f64 (finite-difference oracles run in 64-bit).
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.wide())
    }
}

/// Minimum scalar multiply-adds before a kernel fans out across threads.
/// Below this the rayon dispatch overhead dominates.
const PAR_WORK_THRESHOLD: usize = 1 << 15;

/// out[i][j] = b[j] + sum_k x[i][k] w[k][j]
///
/// The k-accumulation starts from the bias and runs in index order; this
/// exact order is relied on for bitwise reproducibility across call sites.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    batch: usize,
    d_in: usize,
    d_out: usize,
    out: &mut [T],
) {
    debug_assert_eq!(x.len(), batch * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(out.len(), batch * d_out);
    let body = |i: usize, out_row: &mut [T]| {
        match b {
            Some(bias) => out_row.copy_from_slice(bias),
            None => out_row.fill(T::zero()),
        }
        let x_row = &x[i * d_in..(i + 1) * d_in];
        for (k, &xv) in x_row.iter().enumerate() {
            let w_row = &w[k * d_out..(k + 1) * d_out];
            for (o, &wv) in out_row.iter_mut().zip(w_row.iter()) {
                *o = *o + xv * wv;
            }
        }
    };
    if batch * d_in * d_out >= PAR_WORK_THRESHOLD && batch > 1 {
        out.par_chunks_mut(d_out).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(d_out).enumerate() {
            body(i, row);
        }
    }
}

/// out[i][j] += sum_k a[i][k] b[k][j]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[i][j] = sum_k a[i][k] bt[j][k]  (A * B^T, both row-major)
pub fn matmul_nt<T: Scalar>(a: &[T], bt: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &bt[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// out[p][q] += sum_r a[r][p] b[r][q]  (A^T * B; the weight-gradient kernel)
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], rows: usize, p: usize, q: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * p);
    debug_assert_eq!(b.len(), rows * q);
    debug_assert_eq!(out.len(), p * q);
    let body = |pi: usize, out_row: &mut [T]| {
        for r in 0..rows {
            let av = a[r * p + pi];
            let b_row = &b[r * q..(r + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if rows * p * q >= PAR_WORK_THRESHOLD && p > 1 {
        out.par_chunks_mut(q).enumerate().for_each(|(pi, row)| body(pi, row));
    } else {
        for (pi, row) in out.chunks_mut(q).enumerate() {
            body(pi, row);
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

/// Column-sum accumulate: out[j] += sum_i a[i][j].
pub fn col_sum_acc<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = *o + v;
        }
    }
}
