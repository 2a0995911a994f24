//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// A dense N-dimensional array of `f64` stored in row-major order.
///
/// The leading dimension is the batch dimension wherever a tensor flows
/// through a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension entry.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers leading-dimension rows by index into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let r = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * r);
        for &i in indices {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn ensure_shape(&self, expected: &[usize], context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(context, expected, &self.shape));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.ensure_shape(&other.shape, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where `op`
/// optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
