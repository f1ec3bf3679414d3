//! Small dense-matrix helpers shared by the solvers.

use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::math;

/// Returns `(m + mᵀ)/2`.
pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_part(m).symmetric_eigen().eigenvalues.min()
}

/// Inverse of a symmetric positive definite matrix via Cholesky, `None` if not SPD.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    sym_part(m).cholesky().map(|c| c.inverse())
}

/// Largest absolute entry; zero for an empty matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| f64::max(acc, math::abs(*v)))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc, (x, y)| f64::max(acc, math::abs(x - y)))
}

/// Maximum absolute row sum (the matrix ∞-norm).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| math::abs(*v)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Copies the `rows × cols` block starting at `(r0, c0)`.
pub fn block(m: &DMatrix<f64>, r0: usize, c0: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    m.view((r0, c0), (rows, cols)).into_owned()
}

/// Writes `src` into `dst` with its top-left corner at `(r0, c0)`.
pub fn set_block(dst: &mut DMatrix<f64>, r0: usize, c0: usize, src: &DMatrix<f64>) {
    dst.view_mut((r0, c0), src.shape()).copy_from(src);
}

/// Block-diagonal matrix from the given blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        set_block(&mut out, r, c, b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        set_block(&mut out, r, 0, b);
        r += b.nrows();
    }
    out
}

/// Concatenates matrices with equal row counts horizontally.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        set_block(&mut out, 0, c, b);
        c += b.ncols();
    }
    out
}

/// Column vector from a slice.
pub fn column(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(values.len(), 1, values)
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if math::abs(self.sum) >= math::abs(x) {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated sum of a sequence, evaluated in order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Flattens matrices into one contiguous column-major buffer.
pub(crate) fn flatten(ms: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ms.iter().map(|m| m.len()).sum());
    for m in ms {
        out.extend_from_slice(m.as_slice());
    }
    out
}
