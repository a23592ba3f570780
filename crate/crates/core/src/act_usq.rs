//! Uniform scalar fake-quantization of activations with a separate scale and
//! zero-point for every timestep.
//!
//! The quantizer is affine and anchored at the calibrated minimum:
//! `q = clip(round((x − z) / s), c_min, c_max)`, `x̂ = s·q + z`, with
//! `s = (max − min)/(c_max − c_min)` and `z = min − s·c_min`. Rounding is
//! half-to-even.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardHooks, ToyUNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleZero {
    pub s: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuantParams {
    pub per_t: BTreeMap<usize, ScaleZero>,
    pub c_min: i32,
    pub c_max: i32,
}

/// Integer clip bounds for `bits`, two's-complement or unsigned.
pub fn clip_bounds(bits: u32, signed: bool) -> Result<(i32, i32)> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Validation(format!(
            "{bits}-bit activations unsupported"
        )));
    }
    Ok(if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    })
}

fn range(ts: &[Tensor]) -> (f64, f64) {
    ts.iter()
        .flat_map(|t| t.data().iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
}

/// Min/max fit per timestep. Constant ranges get `s = 1`.
pub fn calibrate_act(
    samples: &BTreeMap<usize, Vec<Tensor>>,
    bits: u32,
    signed: bool,
) -> Result<ActQuantParams> {
    let (c_min, c_max) = clip_bounds(bits, signed)?;
    if samples.is_empty() {
        return Err(Error::Validation("no activation samples".into()));
    }
    let mut per_t = BTreeMap::new();
    for (&t, ts) in samples {
        if ts.iter().all(Tensor::is_empty) {
            return Err(Error::Validation(format!("no activation samples at t={t}")));
        }
        per_t.insert(t, fit(range(ts), c_min, c_max)?);
    }
    Ok(ActQuantParams {
        per_t,
        c_min,
        c_max,
    })
}

fn fit((lo, hi): (f64, f64), c_min: i32, c_max: i32) -> Result<ScaleZero> {
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Validation("non-finite activation range".into()));
    }
    let s = if hi > lo {
        (hi - lo) / (c_max - c_min) as f64
    } else {
        1.0
    };
    Ok(ScaleZero {
        s,
        z: lo - s * c_min as f64,
    })
}

impl ActQuantParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_min >= self.c_max {
            return Err(Error::Validation(format!(
                "clip bounds {} >= {}",
                self.c_min, self.c_max
            )));
        }
        if self.per_t.is_empty() {
            return Err(Error::Validation("no timesteps".into()));
        }
        if let Some((t, _)) = self
            .per_t
            .iter()
            .find(|(_, p)| !(p.s > 0.0 && p.s.is_finite() && p.z.is_finite()))
        {
            return Err(Error::Validation(format!("invalid scale at t={t}")));
        }
        Ok(())
    }

    /// Parameters for `t`, or for the nearest calibrated timestep (lower on ties).
    pub fn at(&self, t: usize) -> ScaleZero {
        let below = self.per_t.range(..=t).next_back();
        let above = self.per_t.range(t..).next();
        match (below, above) {
            (Some((a, pa)), Some((b, pb))) => {
                if b - t < t - a {
                    *pb
                } else {
                    *pa
                }
            }
            (Some((_, p)), None) | (None, Some((_, p))) => *p,
            (None, None) => ScaleZero { s: 1.0, z: 0.0 },
        }
    }

    pub fn fake_quant(&self, x: &Tensor, t: usize) -> Tensor {
        let ScaleZero { s, z } = self.at(t);
        let (lo, hi) = (self.c_min as f64, self.c_max as f64);
        x.map(|v| {
            let q = ((v as f64 - z) / s).round_ties_even().clamp(lo, hi);
            (s * q + z) as f32
        })
    }
}

/// Activation quantizers for the inputs of a set of layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    pub layers: BTreeMap<usize, ActQuantParams>,
}

impl ActQuantizer {
    /// Records the input of every layer in `layers` over the calibration
    /// inputs and fits one parameter set per layer and timestep.
    pub fn calibrate(
        model: &ToyUNet,
        inputs: &[(Tensor, usize, Option<usize>)],
        layers: &[usize],
        bits: u32,
        signed: bool,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Validation("empty activation calibration set".into()));
        }
        let ranges = inputs
            .par_iter()
            .map(|(x, t, c)| {
                let tr = model.forward_traced(x, *t, *c, None)?;
                Ok((
                    *t,
                    layers
                        .iter()
                        .map(|&l| tr.layer_input(l).map(|a| range(std::slice::from_ref(a))))
                        .collect::<Vec<_>>(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (c_min, c_max) = clip_bounds(bits, signed)?;
        let mut out = BTreeMap::new();
        for (k, &l) in layers.iter().enumerate() {
            let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for (t, r) in &ranges {
                let (lo, hi) =
                    r[k].ok_or_else(|| Error::Validation(format!("layer {l} never ran")))?;
                let e = acc.entry(*t).or_insert((f64::INFINITY, f64::NEG_INFINITY));
                *e = (e.0.min(lo), e.1.max(hi));
            }
            let per_t = acc
                .into_iter()
                .map(|(t, r)| Ok((t, fit(r, c_min, c_max)?)))
                .collect::<Result<_>>()?;
            out.insert(
                l,
                ActQuantParams {
                    per_t,
                    c_min,
                    c_max,
                },
            );
        }
        Ok(Self { layers: out })
    }
}

impl ForwardHooks<f32> for ActQuantizer {
    fn layer_input(&self, layer: usize, t: usize, x: &Tensor) -> Option<Tensor> {
        self.layers.get(&layer).map(|p| p.fake_quant(x, t))
    }
}
