//! Dense row-major tensors and the handful of kernels the network needs.
//!
//! Everything is NCHW. Matrix products go through `ndarray`'s GEMM (backed by
//! `matrixmultiply`), all other kernels are plain loops.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of every tensor: `f32` for training, `f64` for gradient checks.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite float conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Copy of sample `n` of a batch, keeping a leading batch dim of 1.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenate along the leading (batch) dimension.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for item in items {
            if item.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    item.shape, first.shape
                )));
            }
            batch += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }
}

/// `c = a · b (+ c if accumulate)` on row-major slices, with optional transposes.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_view = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let b_view = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut c_view = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    let beta = if accumulate { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &a_view, &b_view, beta, &mut c_view);
}

/// Geometry of a 2-D sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfold `c×h×w` into `(c·k·k) × (oh·ow)` patch columns.
pub(crate) fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = win.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = valid_outputs(kx, win, w, ow);
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let first = lo * win.stride + kx - win.pad;
                    if win.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(win.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
fn valid_outputs(kx: usize, win: Window, w: usize, ow: usize) -> (usize, usize) {
    let lo = win.pad.saturating_sub(kx).div_ceil(win.stride).min(ow);
    let hi = if w + win.pad > kx { ((w + win.pad - kx - 1) / win.stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `c×h×w`.
pub(crate) fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = win.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = valid_outputs(kx, win, w, ow);
                if lo == hi {
                    continue;
                }
                let first = lo * win.stride + kx - win.pad;
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    if win.stride == 1 {
                        for (d, &v) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(win.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
