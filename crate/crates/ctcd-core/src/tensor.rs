use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. The last axis is the "feature" axis for every
/// per-row operation (softmax, layer norm, gather-per-row); leading axes are
/// treated as one flattened row dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True scalar: shape [] or [1].
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Last-axis length; a rank-0 scalar is one row of one column.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis slices (product of leading dims).
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {} elements as {:?}", self.data.len(), shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// Row-major matmul: self [m,k] @ other [k,n].
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, k) = (self.rows(), self.last_dim());
        let (k2, n) = (other.rows(), other.last_dim());
        debug_assert_eq!(k, k2);
        let mut out = Tensor::zeros(vec![m, n]);
        assert!(self.data.len() >= m * k && other.data.len() >= k * n);
        unsafe {
            S::gemm_strided(
                m, k, n,
                self.data.as_ptr(), k as isize, 1,
                other.data.as_ptr(), n as isize, 1,
                out.data.as_mut_ptr(),
            );
        }
        out
    }

    /// self [m,k] @ other^T where other is [n,k].
    pub fn matmul_bt(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, k) = (self.rows(), self.last_dim());
        let (n, k2) = (other.rows(), other.last_dim());
        debug_assert_eq!(k, k2);
        let mut out = Tensor::zeros(vec![m, n]);
        assert!(self.data.len() >= m * k && other.data.len() >= n * k);
        unsafe {
            S::gemm_strided(
                m, k, n,
                self.data.as_ptr(), k as isize, 1,
                other.data.as_ptr(), 1, k as isize,
                out.data.as_mut_ptr(),
            );
        }
        out
    }

    /// self^T @ other where self is [k,m], other is [k,n].
    pub fn matmul_at(&self, other: &Tensor<S>) -> Tensor<S> {
        let (k, m) = (self.rows(), self.last_dim());
        let (k2, n) = (other.rows(), other.last_dim());
        debug_assert_eq!(k, k2);
        let mut out = Tensor::zeros(vec![m, n]);
        assert!(self.data.len() >= k * m && other.data.len() >= k * n);
        unsafe {
            S::gemm_strided(
                m, k, n,
                self.data.as_ptr(), 1, m as isize,
                other.data.as_ptr(), n as isize, 1,
                out.data.as_mut_ptr(),
            );
        }
        out
    }
}
