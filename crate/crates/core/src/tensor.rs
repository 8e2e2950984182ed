//! Dense row-major matrices and strided views.

use std::ops::{Index, IndexMut};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> MatMut<'_, T> {
        MatMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
            data: &mut self.data,
        }
    }

    /// Rows `start..start + len` as a view.
    pub fn row_block(&self, start: usize, len: usize) -> MatRef<'_, T> {
        assert!(start + len <= self.rows);
        MatRef {
            data: &self.data[start * self.cols..(start + len) * self.cols],
            rows: len,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    pub fn row_block_mut(&mut self, start: usize, len: usize) -> MatMut<'_, T> {
        assert!(start + len <= self.rows);
        let c = self.cols;
        MatMut {
            data: &mut self.data[start * c..(start + len) * c],
            rows: len,
            cols: c,
            rs: c,
            cs: 1,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Row-major view over `data` with an explicit row stride.
    pub fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = Self {
            data,
            rows,
            cols,
            rs,
            cs,
        };
        view.check();
        view
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Columns `start..start + len`.
    pub fn col_block(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        let offset = start * self.cs;
        Self {
            data: if len == 0 || self.rows == 0 {
                &self.data[..0]
            } else {
                &self.data[offset..]
            },
            rows: self.rows,
            cols: len,
            rs: self.rs,
            cs: self.cs,
        }
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatMut<'a, T> {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col_block(self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols);
        let offset = start * self.cs;
        let rows = self.rows;
        Self {
            data: if len == 0 || rows == 0 {
                &mut self.data[..0]
            } else {
                &mut self.data[offset..]
            },
            rows,
            cols: len,
            rs: self.rs,
            cs: self.cs,
        }
    }

    pub fn rb(&mut self) -> MatMut<'_, T> {
        MatMut {
            data: self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.rs,
            cs: self.cs,
        }
    }
}

/// `c <- alpha * a * b + beta * c`.
///
/// With `beta == 0` the previous contents of `c` are ignored (even NaN).
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply handles k == 0 by scaling c; keep the beta == 0 contract explicit.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let last = (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(last < c.data.len(), "gemm output view out of bounds");
    // SAFETY: all three views were bounds-checked against their slices on
    // construction (a, b) or just above (c); `c` is a unique borrow so it
    // cannot alias the shared borrows `a` and `b`.
    unsafe {
        T::gemm_raw(
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

/// `a * b` as a fresh matrix.
pub fn matmul<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    gemm(T::one(), a, b, T::zero(), out.view_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    #[test]
    fn gemm_matches_naive_with_transposes_and_blocks() {
        let a = Matrix::from_fn(5, 7, |i, j| (i * 7 + j) as f64 * 0.1 - 1.0);
        let b = Matrix::from_fn(7, 3, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
        let c = matmul(a.view(), b.view());
        assert!(c.max_abs_diff(&naive(&a, &b)) < 1e-12);

        let bt = b.view().t().to_matrix();
        let c2 = matmul(a.view(), bt.view().t());
        assert!(c2.max_abs_diff(&c) < 1e-12);

        // column block of a (cols 2..5) times rows 2..5 of b
        let sub = matmul(a.view().col_block(2, 3), b.view().t().col_block(2, 3).t());
        let expect = Matrix::from_fn(5, 3, |i, j| (2..5).map(|k| a[(i, k)] * b[(k, j)]).sum());
        assert!(sub.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gemm_accumulates_into_column_block() {
        let a = Matrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let b = Matrix::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let mut c = Matrix::filled(2, 4, 1.0);
        gemm(1.0, a.view(), b.view(), 1.0, c.view_mut().col_block(2, 2));
        assert_eq!(c.row(0), &[1.0, 1.0, 1.0, 2.0]);
        assert_eq!(c.row(1), &[1.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn beta_zero_ignores_nan() {
        let a = Matrix::filled(1, 1, 2.0f32);
        let mut c = Matrix::filled(1, 1, f32::NAN);
        gemm(1.0, a.view(), a.view(), 0.0, c.view_mut());
        assert_eq!(c[(0, 0)], 4.0);
    }
}
