//! Dense n-dimensional arrays in row-major order: the carrier for images,
//! feature maps, embeddings, parameters, and gradients.

use crate::error::{Error, Result};
use crate::real::Real;

/// An n-dimensional array of scalars stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> DenseArray<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements but {} were given",
                shape,
                len,
                data.len()
            )));
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let len: usize = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: (0..len).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of identical total size.
    pub fn with_shape(self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                len
            )));
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Leading extent; arrays viewed as `rows x row_len`.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of all trailing extents.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: F) {
        debug_assert_eq!(self.ndim(), 2);
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn get3(&self, i: usize, j: usize, k: usize) -> F {
        debug_assert_eq!(self.ndim(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: F) {
        debug_assert_eq!(self.ndim(), 3);
        let (s1, s2) = (self.shape[1], self.shape[2]);
        self.data[(i * s1 + j) * s2 + k] = v;
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other` (shapes must match).
    pub fn axpy(&mut self, alpha: F, other: &DenseArray<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "axpy operands have shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (d, &s) in self.data.iter_mut().zip(other.data.iter()) {
            *d = *d + alpha * s;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: F) {
        for d in self.data.iter_mut() {
            *d = *d * alpha;
        }
    }

    pub fn fill(&mut self, value: F) {
        for d in self.data.iter_mut() {
            *d = value;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn min_value(&self) -> F {
        self.data.iter().copied().fold(F::infinity(), F::min)
    }

    pub fn max_value(&self) -> F {
        self.data.iter().copied().fold(F::neg_infinity(), F::max)
    }

    /// Matrix product of two 2-d arrays: `(m x k) . (k x n)`.
    pub fn matmul(&self, rhs: &DenseArray<F>) -> Result<DenseArray<F>> {
        matmul_general(self, false, rhs, false)
    }

    /// `self^T . rhs` where `self` is `k x m` and `rhs` is `k x n`.
    pub fn matmul_tn(&self, rhs: &DenseArray<F>) -> Result<DenseArray<F>> {
        matmul_general(self, true, rhs, false)
    }

    /// `self . rhs^T` where `self` is `m x k` and `rhs` is `n x k`.
    pub fn matmul_nt(&self, rhs: &DenseArray<F>) -> Result<DenseArray<F>> {
        matmul_general(self, false, rhs, true)
    }
}

fn matmul_general<F: Real>(
    a: &DenseArray<F>,
    trans_a: bool,
    b: &DenseArray<F>,
    trans_b: bool,
) -> Result<DenseArray<F>> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = if trans_a {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner extents disagree: {:?}{} . {:?}{}",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" }
        )));
    }
    let mut out = DenseArray::zeros(&[m, n]);
    F::gemm(
        trans_a,
        trans_b,
        m,
        ka,
        n,
        F::one(),
        a.data(),
        b.data(),
        F::zero(),
        out.data_mut(),
    );
    Ok(out)
}
