//! Stage-1 calibration: alternating code search and codebook refinement
//! against `tr((W−Ŵ)·G·(W−Ŵ)ᵀ)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::gram::{layer_objective, quad_form, Gram};
use super::kmeans::kmeans;
use super::search::{entry_norms, objective, search_group, GroupMetric};
use super::{GroupLayout, QuantizedLayer};
use crate::error::{dim_err, Error, Result};
use crate::nn::LayerKind;
use crate::optim::{AdamConfig, Moments};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub n_bits: u32,
    /// Stop once a round improves the objective by less than this fraction.
    pub tol: f64,
    pub max_rounds: usize,
    pub beam: usize,
    pub kmeans_iters: usize,
    /// Adam steps on the codebooks per round.
    pub cb_steps: usize,
    /// Codebook learning rate, relative to the RMS of the layer weights.
    pub cb_lr: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_bits: 8,
            tol: 0.01,
            max_rounds: 32,
            beam: 8,
            kmeans_iters: 10,
            cb_steps: 25,
            cb_lr: 0.01,
        }
    }
}

/// Residual k-means: codebook `m` clusters what codebooks `0..m` left over.
pub fn init_codebooks(
    groups: &Tensor,
    m: usize,
    n_bits: u32,
    iters: usize,
    rng: &mut SeededRng,
) -> (Vec<Tensor>, Vec<u8>) {
    let [n, g] = [groups.shape()[0], groups.shape()[1]];
    let k = 1usize << n_bits;
    let mut residual = groups.clone();
    let mut codebooks = Vec::with_capacity(m);
    let mut codes = vec![0u8; n * m];
    for mi in 0..m {
        let (c, a) = kmeans(&residual, k, iters, rng);
        let r = residual.data_mut();
        for (i, &ai) in a.iter().enumerate() {
            codes[i * m + mi] = ai as u8;
            for s in 0..g {
                r[i * g + s] -= c.data()[ai * g + s];
            }
        }
        codebooks.push(c);
    }
    (codebooks, codes)
}

/// Per-layer scratch state: the residual `E = W − Ŵ` and `Z = E·G`.
struct Work<'a> {
    gram: &'a Gram,
    d: usize,
    rows: usize,
    e: Vec<f64>,
    z: Vec<f64>,
    /// `(row, col)` of each slot of each group in the `[rows, d]` view.
    slots: Vec<Vec<Option<(usize, usize)>>>,
    key: Vec<usize>,
    h: Vec<Vec<f64>>,
}

fn recon_flat<T: Scalar>(layout: &GroupLayout, codes: &[u8], codebooks: &[Tensor<T>]) -> Vec<f64> {
    let (g, m) = (layout.g, codebooks.len());
    let mut out = vec![0.0f64; layout.numel()];
    let mut acc = vec![T::zero(); g];
    for i in 0..layout.n_groups {
        acc.iter_mut().for_each(|a| *a = T::zero());
        for (mi, cb) in codebooks.iter().enumerate() {
            let c = codes[i * m + mi] as usize;
            for (a, &v) in acc.iter_mut().zip(&cb.data()[c * g..(c + 1) * g]) {
                *a += v;
            }
        }
        for s in 0..g {
            if let Some(f) = layout.slot(i, s) {
                out[f] = acc[s].as_f64();
            }
        }
    }
    out
}

fn check_dims(w: &Tensor, layout: &GroupLayout, gram: &Gram) -> Result<()> {
    if w.shape() != layout.shape.as_slice() {
        return dim_err(format!(
            "weights {:?} for layout {:?}",
            w.shape(),
            layout.shape
        ));
    }
    if gram.dim() != layout.row_len() {
        return dim_err(format!(
            "gram of dim {} for rows of {}",
            gram.dim(),
            layout.row_len()
        ));
    }
    Ok(())
}

impl<'a> Work<'a> {
    fn new(layout: &GroupLayout, gram: &'a Gram) -> Self {
        let (d, rows, g) = (layout.row_len(), layout.rows(), layout.g);
        let mut keys: HashMap<Vec<Option<(usize, usize)>>, usize> = HashMap::new();
        let mut h = Vec::new();
        let mut slots = Vec::with_capacity(layout.n_groups);
        let mut key = Vec::with_capacity(layout.n_groups);
        for i in 0..layout.n_groups {
            let sl: Vec<Option<(usize, usize)>> = (0..g)
                .map(|s| layout.slot(i, s).map(|f| (f / d, f % d)))
                .collect();
            let r0 = sl.iter().flatten().next().map_or(0, |p| p.0);
            let rel: Vec<_> = sl.iter().map(|p| p.map(|(r, c)| (r - r0, c))).collect();
            let next = keys.len();
            let k = *keys.entry(rel).or_insert_with(|| {
                let mut hm = vec![0.0; g * g];
                for a in 0..g {
                    for b in 0..g {
                        if let (Some((ra, ca)), Some((rb, cb))) = (sl[a], sl[b]) {
                            if ra == rb {
                                hm[a * g + b] = gram.at(ca, cb);
                            }
                        }
                    }
                }
                h.push(hm);
                next
            });
            slots.push(sl);
            key.push(k);
        }
        Self {
            gram,
            d,
            rows,
            e: Vec::new(),
            z: Vec::new(),
            slots,
            key,
            h,
        }
    }

    fn set_residual(&mut self, w: &Tensor, w_hat: &[f64]) {
        self.e = w
            .data()
            .iter()
            .zip(w_hat)
            .map(|(&a, &b)| a as f64 - b)
            .collect();
        let d = self.d;
        self.z = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let er = &self.e[r * d..(r + 1) * d];
            for (j, zj) in self.z[r * d..(r + 1) * d].iter_mut().enumerate() {
                // G is symmetric, so row j of G is column j.
                *zj = self.gram.data()[j * d..(j + 1) * d]
                    .iter()
                    .zip(er)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }

    fn objective(&self) -> f64 {
        quad_form(&self.e, self.rows, self.gram)
    }

    fn z_group(&self, i: usize) -> Vec<f64> {
        self.slots[i]
            .iter()
            .map(|p| p.map_or(0.0, |(r, c)| self.z[r * self.d + c]))
            .collect()
    }

    /// Applies a change `Ŵ_group: v → u`.
    fn apply(&mut self, i: usize, v: &[f64], u: &[f64]) {
        let d = self.d;
        for (s, p) in self.slots[i].iter().enumerate() {
            let Some((r, c)) = *p else { continue };
            let delta = v[s] - u[s];
            if delta == 0.0 {
                continue;
            }
            self.e[r * d + c] += delta;
            let grow = &self.gram.data()[c * d..(c + 1) * d];
            for (z, &gv) in self.z[r * d..(r + 1) * d].iter_mut().zip(grow) {
                *z += delta * gv;
            }
        }
    }
}

fn codebooks_f64(q: &QuantizedLayer) -> Vec<Vec<f64>> {
    q.codebooks
        .iter()
        .map(|c| c.data().iter().map(|&v| v as f64).collect())
        .collect()
}

fn group_f64(q: &QuantizedLayer, codes: &[u8]) -> Vec<f64> {
    let g = q.layout.g;
    let mut acc = vec![0.0f32; g];
    for (m, &c) in codes.iter().enumerate() {
        let row = &q.codebooks[m].data()[c as usize * g..(c as usize + 1) * g];
        acc.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    acc.iter().map(|&v| v as f64).collect()
}

/// One coordinate pass over all groups. A group's codes change only when the
/// new reconstruction strictly lowers the objective, so the objective never
/// increases. Returns the number of groups whose codes changed.
pub fn beam_search_codes(
    w: &Tensor,
    q: &mut QuantizedLayer,
    gram: &Gram,
    beam: usize,
) -> Result<usize> {
    if beam == 0 {
        return Err(Error::Validation("beam width must be at least 1".into()));
    }
    check_dims(w, &q.layout, gram)?;
    let g = q.layout.g;
    let mut work = Work::new(&q.layout, gram);
    work.set_residual(w, &recon_flat(&q.layout, &q.codes, &q.codebooks));
    let cb = codebooks_f64(q);
    let chc: Vec<Vec<Vec<f64>>> = work.h.iter().map(|h| entry_norms(h, &cb, g)).collect();
    let m = q.m();
    let mut changed = 0;
    for i in 0..q.n_groups() {
        let h = &work.h[work.key[i]];
        let current = q.group_codes(i).to_vec();
        let v = group_f64(q, &current);
        let zg = work.z_group(i);
        let b: Vec<f64> = (0..g)
            .map(|s| {
                h[s * g..(s + 1) * g]
                    .iter()
                    .zip(&v)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
                    + zg[s]
            })
            .collect();
        let metric = GroupMetric {
            h,
            chc: &chc[work.key[i]],
        };
        let best = search_group(&cb, g, &metric, &b, &current, beam);
        if best == current {
            continue;
        }
        let u = group_f64(q, &best);
        if objective(h, &b, &u, g) < objective(h, &b, &v, g) {
            q.codes[i * m..(i + 1) * m].copy_from_slice(&best);
            work.apply(i, &v, &u);
            changed += 1;
        }
    }
    Ok(changed)
}

/// Gradient of the calibration objective with respect to every codebook
/// entry, with the reconstruction evaluated in `T`.
pub fn codebook_gradient<T: Scalar>(
    w: &Tensor,
    layout: &GroupLayout,
    codes: &[u8],
    codebooks: &[Tensor<T>],
    gram: &Gram,
) -> Result<Vec<Tensor<T>>> {
    check_dims(w, layout, gram)?;
    let mut work = Work::new(layout, gram);
    work.set_residual(w, &recon_flat(layout, codes, codebooks));
    Ok(gradient_from_work(&work, layout, codes, codebooks))
}

fn gradient_from_work<T: Scalar>(
    work: &Work,
    layout: &GroupLayout,
    codes: &[u8],
    codebooks: &[Tensor<T>],
) -> Vec<Tensor<T>> {
    let (g, m) = (layout.g, codebooks.len());
    let mut grads: Vec<Vec<f64>> = codebooks.iter().map(|c| vec![0.0; c.len()]).collect();
    for i in 0..layout.n_groups {
        let zg = work.z_group(i);
        for mi in 0..m {
            let c = codes[i * m + mi] as usize;
            for s in 0..g {
                grads[mi][c * g + s] -= 2.0 * zg[s];
            }
        }
    }
    grads
        .into_iter()
        .zip(codebooks)
        .map(|(gv, cb)| {
            Tensor::new(cb.shape().to_vec(), gv.into_iter().map(T::of).collect()).expect("shape")
        })
        .collect()
}

/// Objective for arbitrary-precision codebooks (used by gradient checks).
pub fn codebook_objective<T: Scalar>(
    w: &Tensor,
    layout: &GroupLayout,
    codes: &[u8],
    codebooks: &[Tensor<T>],
    gram: &Gram,
) -> Result<f64> {
    check_dims(w, layout, gram)?;
    let mut work = Work::new(layout, gram);
    work.set_residual(w, &recon_flat(layout, codes, codebooks));
    Ok(work.objective())
}

/// Adam on the codebook entries with codes held fixed. A step that would
/// raise the objective is retried with half the learning rate, so the
/// objective is non-increasing over the call. Returns the final objective.
pub fn update_codebooks(
    w: &Tensor,
    q: &mut QuantizedLayer,
    gram: &Gram,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_dims(w, &q.layout, gram)?;
    let adam = AdamConfig::default();
    let mut work = Work::new(&q.layout, gram);
    work.set_residual(w, &recon_flat(&q.layout, &q.codes, &q.codebooks));
    let mut obj = work.objective();
    let mut moments: Vec<Moments> = q.codebooks.iter().map(|c| Moments::new(c.len())).collect();
    let mut lr = lr;
    let mut t = 0u64;
    for _ in 0..steps {
        if obj == 0.0 {
            break;
        }
        let grads = gradient_from_work(&work, &q.layout, &q.codes, &q.codebooks);
        if grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)) {
            break;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut cbs = q.codebooks.clone();
            let mut ms = moments.clone();
            for ((c, m), g) in cbs.iter_mut().zip(ms.iter_mut()).zip(&grads) {
                m.step(&adam, c.data_mut(), g.data(), lr, t + 1);
            }
            let mut trial = Work::new(&q.layout, gram);
            trial.set_residual(w, &recon_flat(&q.layout, &q.codes, &cbs));
            let o = trial.objective();
            if o <= obj {
                q.codebooks = cbs;
                moments = ms;
                work = trial;
                obj = o;
                t += 1;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(obj)
}

fn rms(w: &Tensor) -> f64 {
    (w.sum_sq() / w.len() as f64).sqrt().max(1e-12)
}

/// Full calibration of one layer with `m` codebooks from a k-means start.
pub fn calibrate_layer(
    id: &str,
    kind: LayerKind,
    w: &Tensor,
    gram: &Gram,
    m: usize,
    cfg: &CalibConfig,
    rng: &mut SeededRng,
) -> Result<QuantizedLayer> {
    if !(1..=4).contains(&m) {
        return Err(Error::Validation(format!("M={m} outside 1..=4")));
    }
    if gram.samples() == 0 {
        return Err(Error::Validation("empty calibration set".into()));
    }
    let layout = GroupLayout::for_kind(kind, w.shape())?;
    check_dims(w, &layout, gram)?;
    let groups = layout.gather(w)?;
    let (codebooks, codes) = init_codebooks(&groups, m, cfg.n_bits, cfg.kmeans_iters, rng);
    let q = QuantizedLayer::new(id, kind, layout, cfg.n_bits, codebooks, codes)?;
    refine(w, q, gram, cfg)
}

/// Calibration with `M+1` codebooks starting from an `M`-codebook solution.
/// The new codebook holds an exact zero entry, which every group starts on,
/// and k-means centroids of the residual `W − Ŵ` in the other rows, so the
/// result is never worse than `prev`.
pub fn calibrate_layer_warm(
    w: &Tensor,
    gram: &Gram,
    prev: &QuantizedLayer,
    cfg: &CalibConfig,
    rng: &mut SeededRng,
) -> Result<QuantizedLayer> {
    let m = prev.m();
    if m >= 4 {
        return Err(Error::Validation("cannot warm-start beyond M=4".into()));
    }
    check_dims(w, &prev.layout, gram)?;
    let mut q = prev.clone();
    let residual = q
        .layout
        .gather(w)?
        .sub(&q.layout.gather(&prev.reconstruct())?)?;
    let (cent, _) = kmeans(&residual, q.k() - 1, cfg.kmeans_iters, rng);
    let mut cb = vec![0.0f32; q.layout.g];
    cb.extend_from_slice(cent.data());
    q.codebooks.push(Tensor::new(vec![q.k(), q.layout.g], cb)?);
    q.codes = (0..q.n_groups())
        .flat_map(|i| {
            prev.group_codes(i)
                .iter()
                .copied()
                .chain(std::iter::once(0))
        })
        .collect();
    q.validate()?;
    refine(w, q, gram, cfg)
}

fn refine(
    w: &Tensor,
    mut q: QuantizedLayer,
    gram: &Gram,
    cfg: &CalibConfig,
) -> Result<QuantizedLayer> {
    let mut obj = layer_objective(w, &q, gram)?;
    let mut history = vec![obj];
    let lr = cfg.cb_lr * rms(w);
    for _ in 0..cfg.max_rounds {
        if obj == 0.0 {
            break;
        }
        let snapshot = q.clone();
        beam_search_codes(w, &mut q, gram, cfg.beam)?;
        update_codebooks(w, &mut q, gram, lr, cfg.cb_steps)?;
        let next = layer_objective(w, &q, gram)?;
        if next > obj {
            q = snapshot;
            break;
        }
        history.push(next);
        let rel = (obj - next) / obj;
        obj = next;
        if rel < cfg.tol {
            break;
        }
    }
    q.history = history;
    Ok(q)
}
