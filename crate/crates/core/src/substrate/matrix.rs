//! Dense row-major `f64` matrices and the GEMM wrapper used by the tape.

use serde::{Deserialize, Serialize};

/// Owned row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
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

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "vstack width mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Mat::from_vec(self.rows + other.rows, self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl MatRef<'_> {
    pub fn to_owned(&self) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.to_vec())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Row/column strides of an operand as seen by GEMM.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides {
    pub rs: isize,
    pub cs: isize,
}

impl Strides {
    /// Strides of `op(M)` where `M` is row-major with `cols` columns.
    pub fn of(cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Self {
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    pub fn swap(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n` under arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(span(m, k, sa) <= a.len(), "gemm lhs out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm rhs out of bounds");
    assert!(span(m, n, sc) <= c.len(), "gemm output out of bounds");
    // SAFETY: the three assertions above bound every index GEMM touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.rs,
            sa.cs,
            b.as_ptr(),
            sb.rs,
            sb.cs,
            beta,
            c.as_mut_ptr(),
            sc.rs,
            sc.cs,
        );
    }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * s.rs as usize + (cols as isize - 1) as usize * s.cs as usize + 1
}
