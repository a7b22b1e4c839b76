//! Dense row-major `f64` tensors.
//!
//! Tensors are immutable values: cloning shares the underlying buffer, so
//! they are cheap to pass around and safe to share across threads. All
//! library-produced values are finite; constructors that accept external
//! data validate this.

use std::sync::Arc;

use crate::error::{Error, Result};

/// An immutable dense tensor of 64-bit floats in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data vector.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if expect != data.len() {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!("{expect} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} in tensor data"
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for values the library itself computed.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_unchecked(shape, vec![0.0; n])
    }

    /// Constant-filled tensor.
    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_unchecked(shape, vec![value; n])
    }

    /// Rank-0-like scalar (shape `[1]`).
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_unchecked(vec![1], vec![value])
    }

    /// Length-n vector.
    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new_unchecked(vec![n], data)
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new_unchecked(vec![n, n], data)
    }

    /// Tensor with entries drawn as `f(flat_index)`.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_unchecked(shape, (0..n).map(f).collect())
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

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Entry of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the same buffer reshaped; element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::dim(
                "Tensor::reshape",
                format!("{} elements", self.len()),
                format!("shape {shape:?} ({expect} elements)"),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor::new_unchecked(self.shape.clone(), self.data.iter().copied().map(f).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "Tensor::zip_map",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::new_unchecked(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "Tensor::dot",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix-vector product of a rank-2 tensor with a vector.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::dim("Tensor::matvec", "rank-2 matrix", format!("{:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if x.len() != n {
            return Err(Error::dim(
                "Tensor::matvec",
                format!("vector of length {n}"),
                format!("{:?}", x.shape),
            ));
        }
        Ok(Tensor::new_unchecked(vec![m], matvec_raw(&self.data, m, n, x.data())))
    }
}

/// `out = W x` for a row-major `m x n` matrix.
pub(crate) fn matvec_raw(w: &[f64], m: usize, n: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    let mut out = vec![0.0; m];
    for (row, o) in w.chunks_exact(n).zip(out.iter_mut()) {
        let mut acc = 0.0;
        for (&wv, &xv) in row.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        *o = acc;
    }
    out
}

/// `out = W^T y` for a row-major `m x n` matrix.
pub(crate) fn matvec_transposed_raw(w: &[f64], m: usize, n: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(y.len(), m);
    let mut out = vec![0.0; n];
    for (row, &yv) in w.chunks_exact(n).zip(y.iter()) {
        for (o, &wv) in out.iter_mut().zip(row.iter()) {
            *o += wv * yv;
        }
    }
    out
}
