//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built on: matrix multiply, im2col and direct convolution.
//!
//! All reductions run in a fixed left-to-right order so that two code paths
//! computing the same sum produce bitwise-identical results.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{dim_err, Result};
use crate::rng::SeededRng;

/// Floating point element type. `f32` is used everywhere in production; `f64`
/// exists so gradient checks can run the exact same code at higher precision.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Send + Sync + Sum + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.normal_f64() * std))
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("{op}: shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn sq_dist(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "sq_dist")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum())
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        Ok(self.sq_dist(other)? / self.len() as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data.chunks(cols)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let [m, n] = self.dims2("transpose2d")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub(crate) fn dims2(&self, op: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => dim_err(format!("{op}: expected rank 2, got {:?}", self.shape)),
        }
    }

    pub(crate) fn dims3(&self, op: &str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => dim_err(format!("{op}: expected rank 3, got {:?}", self.shape)),
        }
    }

    pub(crate) fn dims4(&self, op: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => dim_err(format!("{op}: expected rank 4, got {:?}", self.shape)),
        }
    }
}

/// `a[m,k] · b[k,p]`. Each output element is accumulated from zero over `k`
/// in increasing order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2("matmul lhs")?;
    let [k2, p] = b.dims2("matmul rhs")?;
    if k != k2 {
        return dim_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, p], out)
}

fn same_pad_out(len: usize, k: usize, pad: usize, what: &str) -> Result<usize> {
    if k > len + 2 * pad {
        return dim_err(format!(
            "{what}: kernel {k} larger than padded input {}",
            len + 2 * pad
        ));
    }
    Ok(len + 2 * pad - k + 1)
}

/// Unfold `input[C,h,w]` into `[C·kh·kw, h_out·w_out]`; column `j` holds the
/// receptive field of output position `j`, zero outside the input.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    padding: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = input.dims3("im2col")?;
    let (kh, kw) = kernel;
    let ho = same_pad_out(h, kh, padding, "im2col")?;
    let wo = same_pad_out(w, kw, padding, "im2col")?;
    let ncol = ho * wo;
    let mut out = vec![T::zero(); c * kh * kw * ncol];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let dst = &mut out[r * ncol..(r + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = input.data[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * kh * kw, ncol], out)
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `[C,h,w]` image.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    shape: [usize; 3],
    kernel: (usize, usize),
    padding: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = shape;
    let (kh, kw) = kernel;
    let ho = same_pad_out(h, kh, padding, "col2im")?;
    let wo = same_pad_out(w, kw, padding, "col2im")?;
    let [rows, ncol] = cols.dims2("col2im")?;
    if rows != c * kh * kw || ncol != ho * wo {
        return dim_err(format!(
            "col2im: columns {:?} do not match image {shape:?}",
            cols.shape
        ));
    }
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src = &cols.data[r * ncol..(r + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Stride-1 convolution written as explicit loops. The accumulation order
/// (input channel, then kernel row, then kernel column, padding included)
/// matches `matmul(weights, im2col(input))` exactly.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = input.dims3("conv2d input")?;
    let [co, ci, kh, kw] = weights.dims4("conv2d weights")?;
    if ci != c {
        return dim_err(format!(
            "conv2d: weights expect {ci} input channels, input has {c}"
        ));
    }
    let ho = same_pad_out(h, kh, padding, "conv2d")?;
    let wo = same_pad_out(w, kw, padding, "conv2d")?;
    let mut out = vec![T::zero(); co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for i in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy + ky) as isize - padding as isize;
                            let ix = (ox + kx) as isize - padding as isize;
                            let x = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                T::zero()
                            } else {
                                input.data[(i * h + iy as usize) * w + ix as usize]
                            };
                            acc += weights.data[((o * c + i) * kh + ky) * kw + kx] * x;
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out)
}

/// Convolution through im2col + matmul; the fast path used by the model.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let [co, ci, kh, kw] = weights.dims4("conv2d weights")?;
    let [c, h, w] = input.dims3("conv2d input")?;
    if ci != c {
        return dim_err(format!(
            "conv2d: weights expect {ci} input channels, input has {c}"
        ));
    }
    let cols = im2col(input, (kh, kw), padding)?;
    let wmat = weights.clone().reshape(&[co, ci * kh * kw])?;
    let ho = h + 2 * padding - kh + 1;
    let wo = w + 2 * padding - kw + 1;
    matmul(&wmat, &cols)?.reshape(&[co, ho, wo])
}
