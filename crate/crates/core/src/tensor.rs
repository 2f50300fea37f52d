//! Dense row-major `f64` tensors (rank 0..=2 in practice) and the raw
//! kernels the autodiff tape records.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// A dense numeric array. Values are row-major; rank-1 tensors act as row
/// vectors on the left of a matmul and column vectors on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::shape("from_vec", format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(&[rows, cols], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor, as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// Matrix product with rank dispatch:
/// `[m,k]x[k,n] -> [m,n]`, `[m,k]x[k] -> [m]`, `[k]x[k,n] -> [n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(dim_err(a, b));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(&a.data, &b.data, &mut out, m, k, n);
            Tensor::from_vec(&[m, n], out)
        }
        (2, 1) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            if k != b.shape[0] {
                return Err(dim_err(a, b));
            }
            let mut out = vec![0.0; m];
            matmul_into(&a.data, &b.data, &mut out, m, k, 1);
            Ok(Tensor::vector(out))
        }
        (1, 2) => {
            let k = a.shape[0];
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(dim_err(a, b));
            }
            let mut out = vec![0.0; n];
            matmul_into(&a.data, &b.data, &mut out, 1, k, n);
            Ok(Tensor::vector(out))
        }
        _ => Err(Error::shape(
            "matmul",
            format!("unsupported ranks {:?} x {:?}", a.shape, b.shape),
        )),
    }
}

fn dim_err(a: &Tensor, b: &Tensor) -> Error {
    Error::shape(
        "matmul",
        format!("inner dimensions disagree: {:?} x {:?}", a.shape, b.shape),
    )
}

/// `out +=`-free dense product of row-major `a [m,k]` and `b [k,n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // i-k-j order keeps the inner loop streaming over contiguous rows of b.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `a^T @ g` for `a [m,k]`, `g [m,n]` -> `[k,n]`, accumulated into `out`.
pub(crate) fn matmul_at_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

/// `g @ b^T` for `g [m,n]`, `b [k,n]` -> `[m,k]`, accumulated into `out`.
pub(crate) fn matmul_bt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            orow[p] += acc;
        }
    }
}

/// Max-subtracted softmax of a nonempty slice; output sums to 1.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| crate::math::exp(v - max)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Index of the first maximum element of a nonempty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Stable `ln(sum exp(x))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| crate::math::exp(v - max)).sum();
    max + crate::math::ln(sum)
}
