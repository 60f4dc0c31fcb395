//! Dense third-order tensors and the matrix plumbing used by CP-ALS.
//!
//! Storage is a single row-major buffer: entry `(i, j, k)` of an
//! `n1 × n2 × n3` tensor lives at `i·n2·n3 + j·n3 + k`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "matrix buffer",
                expected: vec![rows * cols],
                actual: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
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

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows)
            .map(|r| self.get(r, c).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `selfᵀ · self`, a `cols × cols` Gram matrix.
    pub fn gram(&self) -> Matrix {
        let r = self.cols;
        let mut g = Matrix::zeros(r, r);
        for row in 0..self.rows {
            let x = self.row(row);
            for a in 0..r {
                let xa = x[a];
                if xa == 0.0 {
                    continue;
                }
                for b in a..r {
                    g.data[a * r + b] += xa * x[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                g.data[a * r + b] = g.data[b * r + a];
            }
        }
        g
    }
}

/// Three-way dense tensor of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor3 {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl DenseTensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self {
            dims,
            values: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                context: "tensor buffer",
                expected: vec![n],
                actual: vec![values.len()],
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite tensor value at flat index {pos}")));
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    values.push(f(i, j, k));
                }
            }
        }
        Self { dims, values }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.values[o] = v;
    }

    /// Contiguous mode-3 fiber `(i, j, :)`.
    #[inline]
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j, 0);
        &self.values[o..o + self.dims[2]]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_same_dims(&self, other: &DenseTensor3, context: &'static str) -> Result<()> {
        for m in 0..3 {
            if self.dims[m] != other.dims[m] {
                return Err(Error::DimensionMismatch {
                    context,
                    mode: m + 1,
                    expected: self.dims[m],
                    actual: other.dims[m],
                });
            }
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &DenseTensor3) -> Result<DenseTensor3> {
        self.check_same_dims(other, "tensor subtraction")?;
        Ok(DenseTensor3 {
            dims: self.dims,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `self + c` for a scalar.
    pub fn add_scalar(&self, c: f64) -> DenseTensor3 {
        DenseTensor3 {
            dims: self.dims,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    /// Mode-`m` matricization. Rows are indexed by the mode-`m` index; the
    /// remaining two indices enumerate columns lexicographically, last one fastest.
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        let [n1, n2, n3] = self.dims;
        match mode {
            1 => Matrix::from_vec(n1, n2 * n3, self.values.clone()),
            2 => {
                let mut m = Matrix::zeros(n2, n1 * n3);
                for i in 0..n1 {
                    for j in 0..n2 {
                        for k in 0..n3 {
                            m.set(j, i * n3 + k, self.get(i, j, k));
                        }
                    }
                }
                Ok(m)
            }
            3 => {
                let mut m = Matrix::zeros(n3, n1 * n2);
                for i in 0..n1 {
                    for j in 0..n2 {
                        for k in 0..n3 {
                            m.set(k, i * n2 + j, self.get(i, j, k));
                        }
                    }
                }
                Ok(m)
            }
            other => Err(Error::InvalidMode(other)),
        }
    }

    /// Inverse of [`DenseTensor3::unfold`].
    pub fn refold(matrix: &Matrix, mode: usize, dims: [usize; 3]) -> Result<DenseTensor3> {
        let [n1, n2, n3] = dims;
        let expected = match mode {
            1 => (n1, n2 * n3),
            2 => (n2, n1 * n3),
            3 => (n3, n1 * n2),
            other => return Err(Error::InvalidMode(other)),
        };
        if (matrix.rows, matrix.cols) != expected {
            return Err(Error::ShapeMismatch {
                context: "refold",
                expected: vec![expected.0, expected.1],
                actual: vec![matrix.rows, matrix.cols],
            });
        }
        let t = match mode {
            1 => DenseTensor3::from_fn(dims, |i, j, k| matrix.get(i, j * n3 + k)),
            2 => DenseTensor3::from_fn(dims, |i, j, k| matrix.get(j, i * n3 + k)),
            _ => DenseTensor3::from_fn(dims, |i, j, k| matrix.get(k, i * n2 + j)),
        };
        Ok(t)
    }
}

/// Column-wise Kronecker product: column `l` of the result is `kron(A[:, l], B[:, l])`,
/// so row `a·q + b` holds `A[a, l]·B[b, l]`.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            context: "khatri_rao column count",
            mode: 2,
            expected: a.cols,
            actual: b.cols,
        });
    }
    let r = a.cols;
    let mut out = Matrix::zeros(a.rows * b.rows, r);
    for ia in 0..a.rows {
        for ib in 0..b.rows {
            let row = ia * b.rows + ib;
            for l in 0..r {
                out.data[row * r + l] = a.get(ia, l) * b.get(ib, l);
            }
        }
    }
    Ok(out)
}

/// `Σ w²·x²` over all entries.
pub fn weighted_frobenius_sq(x: &DenseTensor3, w: &DenseTensor3) -> Result<f64> {
    x.check_same_dims(w, "weighted_frobenius_sq")?;
    Ok(x
        .values
        .iter()
        .zip(&w.values)
        .map(|(xv, wv)| (wv * xv).powi(2))
        .sum())
}
