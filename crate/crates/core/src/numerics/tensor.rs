use std::fmt;

use super::kernels;
use super::scalar::{gemm, Precision, Scalar, Strided};
use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient buffer of the same shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .field("len", &self.data.len())
            .finish()
    }
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("×"))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", format!("{numel} elements"), data.len()));
        }
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Constructor for buffers produced by trusted kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", shape_str(&self.shape), shape_str(shape)));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::lit(x.as_f64())).collect()),
        }
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {i} out of range");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        kernels::all_finite(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("[m×k]·[k×n] from {}", shape_str(&self.shape)),
                shape_str(&rhs.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            Strided::row_major(0, k),
            &rhs.data,
            Strided::row_major(0, n),
            T::zero(),
            &mut out,
            Strided::row_major(0, n),
        );
        finite("matmul", Tensor::from_parts(vec![m, n], out))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let n = self.last_dim();
        if self.shape.is_empty() || n == 0 {
            return Err(Error::shape(
                "softmax_rows",
                "non-empty last axis",
                shape_str(&self.shape),
            ));
        }
        let mut out = self.data.clone();
        kernels::softmax_rows_inplace(&mut out, n);
        finite("softmax_rows", Tensor::from_parts(self.shape.clone(), out))
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<T>> {
        let n = self.last_dim();
        if self.shape.is_empty() || n < 2 {
            return Err(Error::shape("layer_norm", "last axis ≥ 2", shape_str(&self.shape)));
        }
        let mut out = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); self.rows()];
        kernels::layer_norm_rows(&self.data, n, T::lit(eps), &mut out, &mut rstd);
        finite("layer_norm", Tensor::from_parts(self.shape.clone(), out))
    }
}

fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}
