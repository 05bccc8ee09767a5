//! Dense row-major f64 tensors.
//!
//! Only what the rest of the crate needs: construction, elementwise maps,
//! reductions and 2-D matrix products. Matrix products go through
//! `matrixmultiply::dgemm`, which accumulates in f64 and is deterministic
//! (no threading).

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

/// Which operand of a product is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row vector `[1 x len]`.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Column vector `[len x 1]`.
    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Invalid(format!(
                    "ragged rows: expected {cols} columns, found {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a rank-2 tensor. Rank-1 tensors are treated as a
    /// single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Copy of rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(TensorError::Invalid(format!(
                "row range {start}..{end} out of bounds for {r} rows"
            )));
        }
        Self::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Gather the given rows (in order) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid(format!(
                    "row {i} out of bounds for {r} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::new(&[idx.len(), c], data)
    }

    pub fn stack_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![rows, cols],
                    right: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(&[rows, cols], data)
    }

    /// `[a | b]` for two matrices with equal row counts.
    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Self> {
        let (ra, ca) = a.dims2()?;
        let (rb, cb) = b.dims2()?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
        }
        Self::new(&[ra, ca + cb], data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
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

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Per-row squared L2 norms of a matrix.
    pub fn row_norms_sq(&self) -> Vec<f64> {
        let c = self.cols().max(1);
        self.data
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds a `[cols]` (or `[1 x cols]`) vector to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Self::new(&self.shape, out)
    }

    /// Column sums of a matrix, as a `[cols]` vector.
    pub fn sum_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Self::new(&[c], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        gemm(self, Transpose::No, other, Transpose::No)
    }

    /// Matrix-vector product for a `[r x c]` matrix and a length-`c`
    /// vector; returns a length-`r` vector.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let (r, c) = self.dims2()?;
        if v.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                left: self.shape.clone(),
                right: vec![v.len()],
            });
        }
        Ok((0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `op(a) * op(b)` where `op` optionally transposes a rank-2 operand.
pub fn gemm(a: &Tensor, ta: Transpose, b: &Tensor, tb: Transpose) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta == Transpose::Yes { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb == Transpose::Yes { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_into(&mut out, 0.0, a.data(), ar, ac, ta, b.data(), br, bc, tb);
    Tensor::new(&[m, n], out)
}

/// `c = beta * c + op(a) * op(b)` on raw row-major buffers. Shapes are the
/// stored (untransposed) dimensions of each operand; the caller guarantees
/// they agree.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    c: &mut [f64],
    beta: f64,
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: Transpose,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: Transpose,
) {
    let (m, k, rsa, csa) = match ta {
        Transpose::No => (ar, ac, ac as isize, 1),
        Transpose::Yes => (ac, ar, 1, ac as isize),
    };
    let (n, rsb, csb) = match tb {
        Transpose::No => (bc, bc as isize, 1),
        Transpose::Yes => (br, 1, bc as isize),
    };
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: every pointer/stride pair addresses memory inside the slices,
    // whose lengths match the stated dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_product_returns_operand() {
        let mut rng = Rng::new(3);
        let b = rng.gaussian(&[3, 5], 0.0, 1.0).unwrap();
        let out = Tensor::eye(3).matmul(&b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn hand_checked_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn product_is_associative_on_random_4x4() {
        let mut rng = Rng::new(11);
        let a = rng.gaussian(&[4, 4], 0.0, 1.0).unwrap();
        let b = rng.gaussian(&[4, 4], 0.0, 1.0).unwrap();
        let c = rng.gaussian(&[4, 4], 0.0, 1.0).unwrap();
        let left = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let right = a.matmul(&b).unwrap().matmul(&c).unwrap();
        assert!(left.max_abs_diff(&right).unwrap() < 1e-12);
    }

    #[test]
    fn transposed_operands_match_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a = rng.gaussian(&[6, 3], 0.0, 1.0).unwrap();
        let b = rng.gaussian(&[6, 4], 0.0, 1.0).unwrap();
        let fast = gemm(&a, Transpose::Yes, &b, Transpose::No).unwrap();
        let slow = a.transpose().unwrap().matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-14);
        let c = rng.gaussian(&[5, 3], 0.0, 1.0).unwrap();
        let fast = gemm(&a, Transpose::No, &c, Transpose::Yes).unwrap();
        let slow = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-14);
    }

    #[test]
    fn inner_dimension_mismatch_is_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn product_rows_do_not_depend_on_batch_size() {
        let mut rng = Rng::new(99);
        let x = rng.gaussian(&[37, 103], 0.0, 1.0).unwrap();
        let w = rng.gaussian(&[256, 103], 0.0, 1.0).unwrap();
        let full = gemm(&x, Transpose::No, &w, Transpose::Yes).unwrap();
        for i in [0, 5, 36] {
            let single = gemm(&x.slice_rows(i, i + 1).unwrap(), Transpose::No, &w, Transpose::Yes).unwrap();
            assert_eq!(single.data(), full.row_slice(i));
        }
    }

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }
}
