//! Layer primitives and their vector-Jacobian products.

use crate::error::{dim_err, Result};
use crate::tensor::{col2im, im2col, matmul, Scalar, Tensor};

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu)
}

/// `dy * silu'(x)` elementwise.
pub fn silu_back<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| g * silu_grad(x))
        .collect();
    Tensor::new(pre.shape().to_vec(), data).expect("same shape")
}

/// Same-padded stride-1 convolution plus per-channel bias.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = w.shape()[2];
    let mut y = crate::tensor::conv2d(x, w, k / 2)?;
    add_channel_bias(&mut y, b.data())?;
    Ok(y)
}

pub fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, b: &[T]) -> Result<()> {
    let [c, h, w] = y.dims3("bias")?;
    if b.len() != c {
        return dim_err(format!("bias of {} for {c} channels", b.len()));
    }
    for (ch, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
        for v in plane {
            *v += b[ch];
        }
    }
    Ok(())
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Backward of [`conv_forward`] given the layer input and upstream gradient.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [co, ci, kh, kw] = w.dims4("conv_backward")?;
    let [c, h, wd] = x.dims3("conv_backward input")?;
    let pad = kh / 2;
    let cols = im2col(x, (kh, kw), pad)?;
    let dym = dy.clone().reshape(&[co, h * wd])?;
    let dw = matmul(&dym, &cols.transpose2d()?)?.reshape(&[co, ci, kh, kw])?;
    let wmat = w.clone().reshape(&[co, ci * kh * kw])?;
    let dcols = matmul(&wmat.transpose2d()?, &dym)?;
    let dx = col2im(&dcols, [c, h, wd], (kh, kw), pad)?;
    let db = Tensor::new(
        vec![co],
        dym.rows().map(|r| r.iter().copied().sum()).collect(),
    )?;
    Ok(ConvGrads { dx, dw, db })
}

/// `y = W v + b` for `W[out, in]`.
pub fn linear_forward<T: Scalar>(v: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, i] = w.dims2("linear")?;
    if v.len() != i {
        return dim_err(format!("linear: input of {} for {i} features", v.len()));
    }
    let col = v.clone().reshape(&[i, 1])?;
    let mut y = matmul(w, &col)?.reshape(&[o])?;
    for (a, &bb) in y.data_mut().iter_mut().zip(b.data()) {
        *a += bb;
    }
    Ok(y)
}

pub struct LinearGrads<T> {
    pub dv: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    v: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let [o, i] = w.dims2("linear_backward")?;
    let dw = Tensor::from_fn(&[o, i], |k| dy.data()[k / i] * v.data()[k % i]);
    let dv = matmul(&dy.clone().reshape(&[1, o])?, w)?.reshape(&[i])?;
    Ok(LinearGrads {
        dv,
        dw,
        db: dy.clone(),
    })
}

/// Sum of each channel plane; the adjoint of broadcasting a per-channel shift.
pub fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = x.dims3("channel_sums")?;
    Tensor::new(
        vec![c],
        x.data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum())
            .collect(),
    )
}

/// 2x2 average pool with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = x.dims3("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let q = T::of(0.25);
    let d = x.data();
    Ok(Tensor::from_fn(&[c, ho, wo], |k| {
        let (ch, r) = (k / (ho * wo), k % (ho * wo));
        let (y, xx) = (2 * (r / wo), 2 * (r % wo));
        let base = ch * h * w;
        (d[base + y * w + xx]
            + d[base + y * w + xx + 1]
            + d[base + (y + 1) * w + xx]
            + d[base + (y + 1) * w + xx + 1])
            * q
    }))
}

pub fn avg_pool2_back<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, ho, wo] = dy.dims3("avg_pool2_back")?;
    let (h, w) = (2 * ho, 2 * wo);
    let q = T::of(0.25);
    Ok(Tensor::from_fn(&[c, h, w], |k| {
        let (ch, r) = (k / (h * w), k % (h * w));
        dy.data()[ch * ho * wo + (r / w / 2) * wo + (r % w) / 2] * q
    }))
}

/// Nearest-neighbour 2x upsample.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = x.dims3("upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    Ok(Tensor::from_fn(&[c, ho, wo], |k| {
        let (ch, r) = (k / (ho * wo), k % (ho * wo));
        x.data()[ch * h * w + (r / wo / 2) * w + (r % wo) / 2]
    }))
}

pub fn upsample2_back<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, ho, wo] = dy.dims3("upsample2_back")?;
    let (h, w) = (ho / 2, wo / 2);
    let d = dy.data();
    Ok(Tensor::from_fn(&[c, h, w], |k| {
        let (ch, r) = (k / (h * w), k % (h * w));
        let (y, xx) = (2 * (r / w), 2 * (r % w));
        let base = ch * ho * wo;
        d[base + y * wo + xx]
            + d[base + y * wo + xx + 1]
            + d[base + (y + 1) * wo + xx]
            + d[base + (y + 1) * wo + xx + 1]
    }))
}

/// Channel concatenation of two `[C,h,w]` tensors.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ca, h, w] = a.dims3("concat")?;
    let [cb, h2, w2] = b.dims3("concat")?;
    if (h, w) != (h2, w2) {
        return dim_err("concat: spatial dims differ");
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, h, w], data)
}

pub fn split<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [c, h, w] = x.dims3("split")?;
    let cut = ca * h * w;
    Ok((
        Tensor::new(vec![ca, h, w], x.data()[..cut].to_vec())?,
        Tensor::new(vec![c - ca, h, w], x.data()[cut..].to_vec())?,
    ))
}

/// Sinusoidal timestep features, `dim/2` sines followed by `dim/2` cosines.
pub fn sinusoidal<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[dim], |k| {
        let i = k % half;
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        T::of(if k < half { arg.sin() } else { arg.cos() })
    })
}
