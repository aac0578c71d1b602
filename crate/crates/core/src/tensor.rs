//! Dense row-major `f64` tensors and the handful of kernels the model needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(alloc::format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
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

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(alloc::format!("expected 2-D tensor, got {:?}", s))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&0);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators let the compiler vectorise without reassociating
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x · wᵀ + b` for `x: n×k`, `w: m×k`, `y: n×m`.
///
/// Rows of `w` whose `active` flag is false are treated as zero and their
/// outputs are set to zero without touching the bias.
pub fn linear_forward(
    x: &[f64],
    n: usize,
    k: usize,
    w: &[f64],
    b: Option<&[f64]>,
    m: usize,
    active: Option<&[bool]>,
    y: &mut [f64],
) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(y.len(), n * m);
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let yi = &mut y[i * m..(i + 1) * m];
        for j in 0..m {
            if let Some(a) = active {
                if !a[j] {
                    yi[j] = 0.0;
                    continue;
                }
            }
            let mut v = dot(xi, &w[j * k..(j + 1) * k]);
            if let Some(b) = b {
                v += b[j];
            }
            yi[j] = v;
        }
    }
}

/// Accumulating backward pass of [`linear_forward`].
///
/// `dw`/`db` receive `gyᵀ·x` and column sums of `gy` for rows flagged in
/// `want_row` (all rows when `None`); `dx` receives `gy·w` over rows flagged
/// in `live_row`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    n: usize,
    k: usize,
    w: &[f64],
    m: usize,
    gy: &[f64],
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
    want_row: Option<&[bool]>,
    live_row: Option<&[bool]>,
) {
    debug_assert_eq!(gy.len(), n * m);
    if let Some(dw) = dw {
        for i in 0..n {
            let xi = &x[i * k..(i + 1) * k];
            let gi = &gy[i * m..(i + 1) * m];
            for j in 0..m {
                if want_row.is_some_and(|r| !r[j]) || gi[j] == 0.0 {
                    continue;
                }
                axpy(gi[j], xi, &mut dw[j * k..(j + 1) * k]);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            let gi = &gy[i * m..(i + 1) * m];
            for j in 0..m {
                if want_row.is_some_and(|r| !r[j]) {
                    continue;
                }
                db[j] += gi[j];
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let gi = &gy[i * m..(i + 1) * m];
            let dxi = &mut dx[i * k..(i + 1) * k];
            for j in 0..m {
                if live_row.is_some_and(|r| !r[j]) || gi[j] == 0.0 {
                    continue;
                }
                axpy(gi[j], &w[j * k..(j + 1) * k], dxi);
            }
        }
    }
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax` of one row written into `out`.
pub fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>()) + max;
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
