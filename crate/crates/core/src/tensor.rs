use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Result shape of a trailing-dimension broadcast: the shorter shape must be
/// a suffix of the longer one.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`. Each output element accumulates over `k`
/// in ascending order.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
