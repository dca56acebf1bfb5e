//! Dense kernels: GEMM wrappers over row-major slices and LU with partial
//! pivoting for the small SCM systems.

use super::tensor::Scalar;

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Use the row-major matrix as stored.
    Plain,
    /// Use the transpose of the row-major matrix.
    Transposed,
}

/// `out = op(a) * op(b) + (accumulate ? out : 0)`.
///
/// `a` is stored row-major as `m x k` (or `k x m` when transposed); likewise
/// `b` is `k x n` (or `n x k`). `out` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    out: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(out.len(), m * n, "gemm out size");
    let (rsa, csa) = match a_layout {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes asserted above; strides describe the stated layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// LU factorization `P M = L U` of a square matrix.
#[derive(Clone, Debug)]
pub struct LuFactors<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> LuFactors<T> {
    /// Factorizes a row-major `n x n` matrix. Returns `None` when a pivot is
    /// exactly zero.
    pub fn new(matrix: &[T], n: usize) -> Option<Self> {
        assert_eq!(matrix.len(), n * n);
        let mut lu = matrix.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&a, &b| {
                    lu[a * n + col]
                        .abs()
                        .partial_cmp(&lu[b * n + col].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            let pivot = lu[pivot_row * n + col];
            if pivot == T::zero() || !pivot.is_finite() {
                return None;
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                perm.swap(col, pivot_row);
            }
            for row in col + 1..n {
                let factor = lu[row * n + col] / pivot;
                lu[row * n + col] = factor;
                for j in col + 1..n {
                    let upd = factor * lu[col * n + j];
                    lu[row * n + j] = lu[row * n + j] - upd;
                }
            }
        }
        Some(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `M X = B` for `B` row-major `n x cols`.
    pub fn solve(&self, rhs: &[T], cols: usize) -> Vec<T> {
        let n = self.n;
        assert_eq!(rhs.len(), n * cols);
        let mut x = vec![T::zero(); n * cols];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * cols..(i + 1) * cols].copy_from_slice(&rhs[p * cols..(p + 1) * cols]);
        }
        // L y = P b (unit lower)
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != T::zero() {
                    for c in 0..cols {
                        let upd = l * x[k * cols + c];
                        x[i * cols + c] = x[i * cols + c] - upd;
                    }
                }
            }
        }
        // U x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != T::zero() {
                    for c in 0..cols {
                        let upd = u * x[k * cols + c];
                        x[i * cols + c] = x[i * cols + c] - upd;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..cols {
                x[i * cols + c] = x[i * cols + c] / d;
            }
        }
        x
    }

    /// Solves `M^T X = B`.
    pub fn solve_transposed(&self, rhs: &[T], cols: usize) -> Vec<T> {
        let n = self.n;
        assert_eq!(rhs.len(), n * cols);
        // M^T = U^T L^T P, so solve U^T w = b, L^T v = w, x = P^T v.
        let mut w = rhs.to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                if u != T::zero() {
                    for c in 0..cols {
                        let upd = u * w[k * cols + c];
                        w[i * cols + c] = w[i * cols + c] - upd;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..cols {
                w[i * cols + c] = w[i * cols + c] / d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[k * n + i];
                if l != T::zero() {
                    for c in 0..cols {
                        let upd = l * w[k * cols + c];
                        w[i * cols + c] = w[i * cols + c] - upd;
                    }
                }
            }
        }
        let mut x = vec![T::zero(); n * cols];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * cols..(p + 1) * cols].copy_from_slice(&w[i * cols..(i + 1) * cols]);
        }
        x
    }

    /// 1-norm condition estimate `||M||_1 * ||M^-1||_1`, evaluated in f64.
    pub fn condition(&self, matrix: &[T]) -> f64 {
        let n = self.n;
        let inv = self.solve(&identity::<T>(n), n);
        one_norm(matrix, n) * one_norm(&inv, n)
    }
}

fn identity<T: Scalar>(n: usize) -> Vec<T> {
    let mut id = vec![T::zero(); n * n];
    for i in 0..n {
        id[i * n + i] = T::one();
    }
    id
}

fn one_norm<T: Scalar>(m: &[T], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| m[i * n + j].as_f64().abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
