use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::nn::{LayerKind, ToyUNet};
use crate::tensor::{im2col, Tensor};

use super::QuantizedLayer;

/// `A·Aᵀ` accumulated over calibration activations, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    d: usize,
    data: Vec<f64>,
    samples: usize,
}

impl Gram {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            data: vec![0.0; d * d],
            samples: 0,
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut g = Self::zeros(d);
        for i in 0..d {
            g.data[i * d + i] = 1.0;
        }
        g.samples = 1;
        g
    }

    /// From a dense row-major `d x d` matrix.
    pub fn from_matrix(d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d * d {
            return dim_err(format!("gram of {} values for d={d}", data.len()));
        }
        Ok(Self {
            d,
            data,
            samples: 1,
        })
    }

    pub fn from_activations(a: &Tensor) -> Result<Self> {
        let mut g = Self::zeros(a.shape()[0]);
        g.accumulate(a)?;
        Ok(g)
    }

    /// `G += A·Aᵀ` for activations `A[d, n]` (one column per sample position).
    pub fn accumulate(&mut self, a: &Tensor) -> Result<()> {
        let [d, n] = a.dims2("gram")?;
        if d != self.d {
            return dim_err(format!("activations of dim {d} for gram of dim {}", self.d));
        }
        let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
        for i in 0..d {
            let ri = &x[i * n..(i + 1) * n];
            for j in i..d {
                let rj = &x[j * n..(j + 1) * n];
                let s: f64 = ri.iter().zip(rj).map(|(p, q)| p * q).sum();
                self.data[i * d + j] += s;
                if i != j {
                    self.data[j * d + i] += s;
                }
            }
        }
        self.samples += n;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    /// Symmetric and positive semi-definite within a relative tolerance.
    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        let scale = (0..d)
            .map(|i| self.at(i, i).abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        for i in 0..d {
            for j in 0..i {
                if (self.at(i, j) - self.at(j, i)).abs() > 1e-9 * scale {
                    return Err(Error::Validation(format!(
                        "gram not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        // Cholesky of G + jitter·I succeeds iff G is PSD up to the jitter.
        let jitter = 1e-9 * scale;
        let mut l = vec![0.0f64; d * d];
        for j in 0..d {
            let mut diag = self.at(j, j) + jitter;
            for k in 0..j {
                diag -= l[j * d + k] * l[j * d + k];
            }
            if diag <= 0.0 {
                return Err(Error::Validation(
                    "gram is not positive semi-definite".into(),
                ));
            }
            let ljj = diag.sqrt();
            l[j * d + j] = ljj;
            for i in j + 1..d {
                let mut s = self.at(i, j);
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                l[i * d + j] = s / ljj;
            }
        }
        Ok(())
    }
}

/// `tr(E·G·Eᵀ)` for `E` given row-major `[rows, d]` in f64.
pub(crate) fn quad_form(e: &[f64], rows: usize, gram: &Gram) -> f64 {
    let d = gram.d;
    let mut total = 0.0;
    let mut ge = vec![0.0f64; d];
    for r in 0..rows {
        let er = &e[r * d..(r + 1) * d];
        for (i, gi) in ge.iter_mut().enumerate() {
            *gi = gram.data[i * d..(i + 1) * d]
                .iter()
                .zip(er)
                .map(|(a, b)| a * b)
                .sum();
        }
        total += er.iter().zip(&ge).map(|(a, b)| a * b).sum::<f64>();
    }
    total
}

pub(crate) fn residual(w: &Tensor, w_hat: &Tensor, d: usize) -> Result<(Vec<f64>, usize)> {
    if w.shape() != w_hat.shape() {
        return dim_err(format!("W {:?} vs W_hat {:?}", w.shape(), w_hat.shape()));
    }
    if w.len() % d != 0 {
        return dim_err(format!("{} weights do not form rows of {d}", w.len()));
    }
    let e = w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    Ok((e, w.len() / d))
}

/// `‖W·A − Ŵ·A‖²_F` evaluated as `tr((W−Ŵ)·G·(W−Ŵ)ᵀ)`; weights are viewed
/// as `[numel/d, d]` with `d` the gram dimension.
pub fn calib_objective(w: &Tensor, w_hat: &Tensor, gram: &Gram) -> Result<f64> {
    gram.validate()?;
    let (e, rows) = residual(w, w_hat, gram.d)?;
    Ok(quad_form(&e, rows, gram))
}

/// Objective of a quantized layer without re-validating the gram.
pub fn layer_objective(w: &Tensor, q: &QuantizedLayer, gram: &Gram) -> Result<f64> {
    let (e, rows) = residual(w, &q.reconstruct(), gram.d)?;
    Ok(quad_form(&e, rows, gram))
}

/// Layer input rearranged so that `W_matrix · A` is the layer's output.
pub(crate) fn activation_matrix(kind: LayerKind, x: &Tensor) -> Result<Tensor> {
    match kind {
        LayerKind::Conv3x3 => im2col(x, (3, 3), 1),
        LayerKind::Conv1x1 => im2col(x, (1, 1), 0),
        LayerKind::Linear | LayerKind::TimeEmbed => x.clone().reshape(&[x.len(), 1]),
    }
}

/// Streams calibration inputs through the model and accumulates one gram per
/// requested layer. Inputs are `(x_t, t, class)`.
pub fn collect_grams(
    model: &ToyUNet,
    inputs: &[(Tensor, usize, Option<usize>)],
    layers: &[usize],
) -> Result<Vec<Gram>> {
    if inputs.is_empty() {
        return Err(Error::Validation("empty calibration set".into()));
    }
    let specs = model.specs();
    let mut grams: Vec<Gram> = layers
        .iter()
        .map(|&i| Gram::zeros(specs[i].weight_count() / specs[i].c_out))
        .collect();
    for chunk in inputs.chunks(64) {
        let traces = chunk
            .par_iter()
            .map(|(x, t, c)| model.forward_traced(x, *t, *c, None))
            .collect::<Result<Vec<_>>>()?;
        grams
            .par_iter_mut()
            .zip(layers.par_iter())
            .try_for_each(|(g, &i)| -> Result<()> {
                for tr in &traces {
                    let x = tr
                        .layer_input(i)
                        .ok_or_else(|| Error::Consistency(format!("layer {i} saw no input")))?;
                    g.accumulate(&activation_matrix(specs[i].kind, x)?)?;
                }
                Ok(())
            })?;
    }
    Ok(grams)
}
