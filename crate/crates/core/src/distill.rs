//! Teacher-student fine-tuning of a quantized model.
//!
//! Each step draws a batch of saved trajectory records, runs the
//! full-precision teacher and the quantized student, and minimises the
//! output error (optionally divided by the mean error of the record's
//! timestep) plus `alpha` times the summed squared error of the block
//! features. The update is split in two: an Adam step on every codebook,
//! then a re-assignment of the codes of the groups with the largest
//! gradients, searched against a gradient step taken in weight space.
//!
//! When the trajectories were generated with guidance, every record is
//! replayed both with its class and unconditionally, since the sampler
//! queries the model both ways.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aq::{search_group, GroupMetric, QuantizedLayer};
use crate::error::{dim_err, Error, Result};
use crate::nn::ToyUNet;
use crate::optim::{AdamConfig, Moments};
use crate::quantized::QuantizedModel;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::TrajectoryStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Trajectories replayed in denoising order, one sampler step per batch.
    TrajectoryAware,
    /// Independent uniform draws over all records.
    RandomUniform,
    /// Timestep drawn from the loss profile, then a uniform record at it.
    RandomWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoKw {
    Auto,
}

/// Feature-loss weight: a number, or `"auto"` to balance the two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Value(f64),
    Auto(AutoKw),
}

/// Stage-2 settings. The full-scale reference run used 32,000 steps with
/// batch 4, a continuous learning rate of 4e-5 decaying linearly to 1e-6 and
/// a discrete learning rate of 1e-4. Desk-scale defaults run 2,000 steps and
/// start the continuous rate at 1e-4 to make up for the shorter schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub strategy: Strategy,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_cont_start: f64,
    pub lr_cont_end: f64,
    pub lr_disc: f64,
    pub alpha: Alpha,
    pub normalize_loss: bool,
    pub invalidate_momentum: bool,
    /// Fraction of groups per layer eligible for code re-assignment each step.
    pub tau: f64,
    /// Beam width of the code search for layers with several codebooks.
    pub beam: usize,
    /// Records per timestep used for the loss profile and `alpha`.
    pub probes_per_timestep: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RandomUniform,
            steps: 2000,
            batch_size: 4,
            lr_cont_start: 1e-4,
            lr_cont_end: 1e-6,
            lr_disc: 1e-4,
            alpha: Alpha::Auto(AutoKw::Auto),
            normalize_loss: true,
            invalidate_momentum: false,
            tau: 0.05,
            beam: 8,
            probes_per_timestep: 8,
            seed: 10,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Validation(format!(
                "tau={} outside (0, 1]",
                self.tau
            )));
        }
        for (name, v) in [
            ("lr_cont_start", self.lr_cont_start),
            ("lr_cont_end", self.lr_cont_end),
            ("lr_disc", self.lr_disc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name}={v} must be positive")));
            }
        }
        if self.batch_size == 0 || self.beam == 0 || self.probes_per_timestep == 0 {
            return Err(Error::Validation(
                "batch_size, beam and probes_per_timestep must be positive".into(),
            ));
        }
        if let Alpha::Value(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Validation(format!("alpha={a} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Continuous learning rate at `step`, linear from start to end.
    pub fn lr_cont(&self, step: usize) -> f64 {
        let f = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        self.lr_cont_start + (self.lr_cont_end - self.lr_cont_start) * f
    }
}

/// Adam moments for every codebook of every quantized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub moments: BTreeMap<usize, Vec<Moments>>,
    pub adam: AdamConfig,
    /// Steps since the last invalidation.
    pub step: u64,
    pub epoch: u64,
}

impl OptimizerState {
    pub fn new(student: &QuantizedModel) -> Self {
        Self {
            moments: student
                .layers
                .iter()
                .map(|(&l, q)| {
                    (
                        l,
                        q.codebooks.iter().map(|c| Moments::new(c.len())).collect(),
                    )
                })
                .collect(),
            adam: AdamConfig::default(),
            step: 0,
            epoch: 0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.moments
            .values()
            .flatten()
            .map(|m| m.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Zeroes all moments and the step counter and advances the epoch counter.
pub fn invalidate_momentum(state: &mut OptimizerState) {
    state
        .moments
        .values_mut()
        .flatten()
        .for_each(Moments::reset);
    state.step = 0;
    state.epoch += 1;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepLossProfile {
    pub timesteps: Vec<usize>,
    pub mean_loss: Vec<f64>,
    /// Categorical sampling weights, proportional to `mean_loss`.
    pub weights: Vec<f64>,
    pub divisors: Vec<f64>,
    /// Set when some timestep had (near) zero loss and uniform weights and
    /// unit divisors were substituted.
    pub degenerate: bool,
}

impl TimestepLossProfile {
    pub fn uniform(timesteps: Vec<usize>) -> Self {
        let n = timesteps.len();
        Self {
            mean_loss: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
            divisors: vec![1.0; n],
            timesteps,
            degenerate: true,
        }
    }

    pub fn divisor(&self, t: usize) -> f64 {
        self.timesteps
            .iter()
            .position(|&x| x == t)
            .map_or(1.0, |i| self.divisors[i])
    }
}

const DEGENERATE_LOSS: f64 = 1e-12;

/// One model query: input, timestep, conditioning.
pub type Sample = (Tensor, usize, Option<usize>);

/// The queries a record stands for: conditional, plus unconditional when the
/// store was generated with guidance.
pub fn replays(store: &TrajectoryStore, idx: usize) -> Vec<Sample> {
    let r = &store.records()[idx];
    let mut v = vec![(r.x_t.clone(), r.t, Some(r.cls))];
    if store.manifest.null_class.is_some() {
        v.push((r.x_t.clone(), r.t, None));
    }
    v
}

fn output_terms(
    teacher: &ToyUNet,
    student: &QuantizedModel,
    samples: &[Sample],
) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|(x, t, c)| {
            let a = teacher.forward(x, *t, *c)?.0;
            let b = student.forward(x, *t, *c)?.0;
            a.sq_dist(&b)
        })
        .collect()
}

/// Mean output error per timestep over the first `probes_per_t` records at
/// each timestep of the store.
pub fn compute_timestep_profile(
    teacher: &ToyUNet,
    student: &QuantizedModel,
    store: &TrajectoryStore,
    probes_per_t: usize,
) -> Result<TimestepLossProfile> {
    let ts = store.timesteps();
    if ts.is_empty() {
        return Err(Error::Validation("empty trajectory store".into()));
    }
    let mut mean_loss = Vec::with_capacity(ts.len());
    for &t in &ts {
        let idx = store.indices_at(t);
        if idx.is_empty() {
            return Err(Error::Validation(format!("no records at timestep {t}")));
        }
        let samples: Vec<Sample> = idx
            .iter()
            .take(probes_per_t)
            .flat_map(|&i| replays(store, i))
            .collect();
        let l = output_terms(teacher, student, &samples)?;
        mean_loss.push(l.iter().sum::<f64>() / l.len() as f64);
    }
    if mean_loss
        .iter()
        .any(|&l| !(l > DEGENERATE_LOSS && l.is_finite()))
    {
        log::warn!(
            "loss profile has a (near) zero timestep; using uniform weights and unit divisors"
        );
        let mut p = TimestepLossProfile::uniform(ts);
        p.mean_loss = mean_loss;
        return Ok(p);
    }
    let total: f64 = mean_loss.iter().sum();
    Ok(TimestepLossProfile {
        weights: mean_loss.iter().map(|l| l / total).collect(),
        divisors: mean_loss.clone(),
        mean_loss,
        timesteps: ts,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Record indices.
    pub indices: Vec<usize>,
    /// This batch starts a new epoch.
    pub epoch_boundary: bool,
}

/// Steps per epoch: one trajectory length for trajectory-aware sampling,
/// otherwise one pass worth of records.
pub fn epoch_len(store: &TrajectoryStore, strategy: Strategy, batch_size: usize) -> usize {
    match strategy {
        Strategy::TrajectoryAware => store.manifest.steps.max(1),
        _ => (store.len() / batch_size.max(1)).max(1),
    }
}

pub fn sample_batch(
    store: &TrajectoryStore,
    strategy: Strategy,
    profile: Option<&TimestepLossProfile>,
    step: usize,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Batch> {
    if store.is_empty() {
        return Err(Error::Validation("empty trajectory store".into()));
    }
    let el = epoch_len(store, strategy, batch_size);
    let epoch_boundary = step > 0 && step.is_multiple_of(el);
    let indices = match strategy {
        Strategy::TrajectoryAware => {
            let n = store.manifest.n_traj;
            let blocks = n.div_ceil(batch_size);
            let block = (step / el) % blocks;
            let k = step % el;
            (block * batch_size..((block + 1) * batch_size).min(n))
                .map(|id| id * store.manifest.steps + k)
                .collect()
        }
        Strategy::RandomUniform => (0..batch_size).map(|_| rng.below(store.len())).collect(),
        Strategy::RandomWeighted => {
            let owned;
            let p = match profile {
                Some(p) => p,
                None => {
                    owned = TimestepLossProfile::uniform(store.timesteps());
                    &owned
                }
            };
            let by_t: Vec<Vec<usize>> = p.timesteps.iter().map(|&t| store.indices_at(t)).collect();
            (0..batch_size)
                .map(|_| {
                    let mut u = rng.uniform_f64();
                    let mut j = p.weights.len() - 1;
                    for (i, &w) in p.weights.iter().enumerate() {
                        if u < w {
                            j = i;
                            break;
                        }
                        u -= w;
                    }
                    let pool = &by_t[j];
                    pool[rng.below(pool.len())]
                })
                .collect()
        }
    };
    Ok(Batch {
        indices,
        epoch_boundary,
    })
}

/// Batch loss with gradient seeds for the student output and features.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms<T = f32> {
    pub loss: f64,
    /// Mean over the batch of `‖μ − μ̂‖²`.
    pub raw_output: f64,
    /// Mean over the batch of `‖μ − μ̂‖² / divisor`.
    pub output: f64,
    /// Mean over the batch of `Σ_l ‖F_l − F̂_l‖²`.
    pub feature: f64,
    pub d_out: Vec<Tensor<T>>,
    pub d_feats: Vec<Vec<Tensor<T>>>,
}

/// `(1/B) Σ_b [‖μ_b − μ̂_b‖² / d_b + α Σ_l ‖F_b,l − F̂_b,l‖²]`
pub fn distill_loss<T: Scalar>(
    teacher_out: &[Tensor<T>],
    student_out: &[Tensor<T>],
    teacher_feats: &[Vec<Tensor<T>>],
    student_feats: &[Vec<Tensor<T>>],
    alpha: f64,
    divisors: &[f64],
) -> Result<LossTerms<T>> {
    let b = teacher_out.len();
    if b == 0
        || student_out.len() != b
        || teacher_feats.len() != b
        || student_feats.len() != b
        || divisors.len() != b
    {
        return dim_err("distillation batch parts disagree in length");
    }
    let inv_b = 1.0 / b as f64;
    let mut out = LossTerms {
        loss: 0.0,
        raw_output: 0.0,
        output: 0.0,
        feature: 0.0,
        d_out: Vec::with_capacity(b),
        d_feats: Vec::with_capacity(b),
    };
    for i in 0..b {
        let (mu, mu_hat) = (&teacher_out[i], &student_out[i]);
        if mu.shape() != mu_hat.shape() {
            return dim_err(format!("outputs {:?} vs {:?}", mu.shape(), mu_hat.shape()));
        }
        if teacher_feats[i].len() != student_feats[i].len() {
            return dim_err("feature lists differ in length");
        }
        let sq = mu.sq_dist(mu_hat)?;
        let d = divisors[i];
        out.raw_output += sq * inv_b;
        out.output += sq / d * inv_b;
        let s = 2.0 / d * inv_b;
        out.d_out.push(Tensor::from_fn(mu.shape(), |k| {
            T::of(s * (mu_hat.data()[k].as_f64() - mu.data()[k].as_f64()))
        }));
        let mut fs = Vec::with_capacity(teacher_feats[i].len());
        for (f, f_hat) in teacher_feats[i].iter().zip(&student_feats[i]) {
            if f.shape() != f_hat.shape() {
                return dim_err(format!("features {:?} vs {:?}", f.shape(), f_hat.shape()));
            }
            out.feature += f.sq_dist(f_hat)? * inv_b;
            let s = 2.0 * alpha * inv_b;
            fs.push(Tensor::from_fn(f.shape(), |k| {
                T::of(s * (f_hat.data()[k].as_f64() - f.data()[k].as_f64()))
            }));
        }
        out.d_feats.push(fs);
    }
    out.loss = out.output + alpha * out.feature;
    Ok(out)
}

pub const ALPHA_RANGE: (f64, f64) = (1e-6, 1e6);

/// Mean output term over mean feature term on the probe samples, clamped;
/// zero (with a warning) when the feature term vanishes.
pub fn auto_alpha(
    teacher: &ToyUNet,
    student: &QuantizedModel,
    probes: &[Sample],
    divisor: &(dyn Fn(usize) -> f64 + Sync),
) -> Result<f64> {
    let terms = probes
        .par_iter()
        .map(|(x, t, c)| {
            let (a, fa) = teacher.forward(x, *t, *c)?;
            let (b, fb) = student.forward(x, *t, *c)?;
            let out = a.sq_dist(&b)? / divisor(*t);
            let feat = fa
                .iter()
                .zip(&fb)
                .map(|(p, q)| p.sq_dist(q))
                .sum::<Result<f64>>()?;
            Ok((out, feat))
        })
        .collect::<Result<Vec<_>>>()?;
    let out: f64 = terms.iter().map(|t| t.0).sum();
    let feat: f64 = terms.iter().map(|t| t.1).sum();
    Ok(alpha_ratio(out, feat))
}

pub fn alpha_ratio(output_term: f64, feature_term: f64) -> f64 {
    if feature_term <= 0.0 {
        log::warn!("feature term is zero; alpha set to 0");
        return 0.0;
    }
    (output_term / feature_term).clamp(ALPHA_RANGE.0, ALPHA_RANGE.1)
}

/// Probe samples for the profile-independent parts of the setup: the first
/// `per_t` records of every timestep, with their replays.
pub fn probe_samples(store: &TrajectoryStore, per_t: usize) -> Vec<Sample> {
    store
        .timesteps()
        .iter()
        .flat_map(|&t| {
            store
                .indices_at(t)
                .into_iter()
                .take(per_t)
                .collect::<Vec<_>>()
        })
        .flat_map(|i| replays(store, i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PvParams {
    pub lr_cont: f64,
    pub lr_disc: f64,
    pub tau: f64,
    pub beam: usize,
    /// Run the code re-assignment phase.
    pub discrete: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PvStats {
    pub groups_considered: usize,
    pub groups_changed: usize,
}

/// Codebook gradient `∂L/∂C_m[c] = Σ_{i: code(i,m)=c} ∂L/∂Ŵ_i`.
pub fn codebook_grads(q: &QuantizedLayer, dw: &Tensor) -> Result<Vec<Tensor>> {
    let g = q.layout.g;
    let groups = q.layout.gather(dw)?;
    let mut out: Vec<Tensor> = (0..q.m()).map(|_| Tensor::zeros(&[q.k(), g])).collect();
    for i in 0..q.n_groups() {
        let gi = &groups.data()[i * g..(i + 1) * g];
        for (m, o) in out.iter_mut().enumerate() {
            let c = q.code(i, m);
            o.data_mut()[c * g..(c + 1) * g]
                .iter_mut()
                .zip(gi)
                .for_each(|(a, &b)| *a += b);
        }
    }
    Ok(out)
}

/// Local objective of one group: `Σ_s mask_s (u_s − target_s)² − Σ_s mask_s target_s²`.
fn masked_objective(u: &[f64], target: &[f64], mask: &[f64]) -> f64 {
    u.iter()
        .zip(target)
        .zip(mask)
        .map(|((&a, &t), &m)| m * (a * a - 2.0 * a * t))
        .sum()
}

fn group_sum(cb: &[Vec<f64>], codes: &[u8], g: usize) -> Vec<f64> {
    let mut u = vec![0.0; g];
    for (m, &c) in codes.iter().enumerate() {
        u.iter_mut()
            .zip(&cb[m][c as usize * g..(c as usize + 1) * g])
            .for_each(|(a, b)| *a += b);
    }
    u
}

type MaskedMetric = (Vec<f64>, Vec<Vec<f64>>);

/// Re-assigns codes of the `⌈tau·N⌉` groups with the largest gradient norm
/// towards `old − lr_disc·grad`, keeping a new tuple only if it strictly
/// lowers the local objective. Returns per selected group
/// `(index, objective before, objective after)`.
pub(crate) fn requantize_layer(
    q: &mut QuantizedLayer,
    old_groups: &Tensor,
    grad_groups: &Tensor,
    lr_disc: f64,
    tau: f64,
    beam: usize,
) -> Vec<(usize, f64, f64)> {
    let (g, n) = (q.layout.g, q.n_groups());
    let gd = grad_groups.data();
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            gd[i * g..(i + 1) * g]
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&i| norms[i] > 0.0).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(((tau * n as f64).ceil() as usize).max(1));
    let cb: Vec<Vec<f64>> = q
        .codebooks
        .iter()
        .map(|c| c.data().iter().map(|&v| v as f64).collect())
        .collect();
    // Masked metric and entry norms, shared by groups with the same padding.
    let mut metrics: BTreeMap<Vec<bool>, MaskedMetric> = BTreeMap::new();
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let mask_b: Vec<bool> = (0..g).map(|s| q.layout.slot(i, s).is_some()).collect();
        let mask: Vec<f64> = mask_b.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (h, chc) = metrics.entry(mask_b).or_insert_with(|| {
            let mut h = vec![0.0; g * g];
            (0..g).for_each(|s| h[s * g + s] = mask[s]);
            let chc = crate::aq::entry_norms(&h, &cb, g);
            (h, chc)
        });
        let target: Vec<f64> = (0..g)
            .map(|s| old_groups.data()[i * g + s] as f64 - lr_disc * gd[i * g + s] as f64)
            .collect();
        let b: Vec<f64> = target.iter().zip(&mask).map(|(t, m)| t * m).collect();
        let current = q.group_codes(i).to_vec();
        let before = masked_objective(&group_sum(&cb, &current, g), &target, &mask);
        let metric = GroupMetric {
            h: &h[..],
            chc: &chc[..],
        };
        let cand = search_group(&cb, g, &metric, &b, &current, beam);
        let after = masked_objective(&group_sum(&cb, &cand, g), &target, &mask);
        let m = q.m();
        let kept = if after < before {
            q.codes[i * m..(i + 1) * m].copy_from_slice(&cand);
            after
        } else {
            before
        };
        out.push((i, before, kept));
    }
    out
}

/// One joint update. `dw` holds `∂L/∂Ŵ` of every quantized layer.
pub fn pv_step(
    student: &mut QuantizedModel,
    dw: &BTreeMap<usize, Tensor>,
    state: &mut OptimizerState,
    p: &PvParams,
) -> Result<PvStats> {
    state.step += 1;
    let step = state.step;
    let adam = state.adam;
    let layers: Vec<usize> = student.layers.keys().copied().collect();
    let mut stats = PvStats::default();
    if state.moments.keys().ne(student.layers.keys()) {
        return Err(Error::Validation(
            "optimizer state does not match the quantized layers".into(),
        ));
    }
    let mut pairs: Vec<_> = student
        .layers
        .iter_mut()
        .zip(state.moments.values_mut())
        .collect();
    let results = pairs
        .par_iter_mut()
        .map(|((&l, q), moments)| -> Result<(usize, usize)> {
            let grad = dw
                .get(&l)
                .ok_or_else(|| Error::Validation(format!("no gradient for layer {l}")))?;
            let old = q.reconstruct_groups();
            let grads = codebook_grads(q, grad)?;
            for ((cb, gr), mo) in q.codebooks.iter_mut().zip(&grads).zip(moments.iter_mut()) {
                mo.step(&adam, cb.data_mut(), gr.data(), p.lr_cont, step);
            }
            if !p.discrete {
                return Ok((0, 0));
            }
            let gg = q.layout.gather(grad)?;
            let r = requantize_layer(q, &old, &gg, p.lr_disc, p.tau, p.beam);
            Ok((r.len(), r.iter().filter(|(_, b, a)| a < b).count()))
        })
        .collect::<Result<Vec<_>>>()?;
    for (c, ch) in results {
        stats.groups_considered += c;
        stats.groups_changed += ch;
    }
    for l in layers {
        student.sync_layer(l)?;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub raw_loss: f64,
    pub normalized_loss: f64,
    pub feature_loss: f64,
    pub lr_cont: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub log: Vec<LogRow>,
    pub profile: TimestepLossProfile,
    pub alpha: f64,
    pub groups_changed: usize,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean per-element output MSE between teacher and student.
pub fn probe_mse(teacher: &ToyUNet, student: &QuantizedModel, samples: &[Sample]) -> Result<f64> {
    let per = samples
        .par_iter()
        .map(|(x, t, c)| {
            teacher
                .forward(x, *t, *c)?
                .0
                .mse(&student.forward(x, *t, *c)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Called after every completed epoch with the epoch count so far.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &QuantizedModel) -> Result<()>;

pub fn run_distillation(
    teacher: &ToyUNet,
    student: &mut QuantizedModel,
    store: &TrajectoryStore,
    cfg: &DistillConfig,
    mut on_epoch: Option<EpochHook>,
) -> Result<DistillReport> {
    cfg.validate()?;
    let use_lut = std::mem::replace(&mut student.use_lut, false);
    let result = distill_inner(teacher, student, store, cfg, &mut on_epoch);
    student.use_lut = use_lut;
    result
}

fn distill_inner(
    teacher: &ToyUNet,
    student: &mut QuantizedModel,
    store: &TrajectoryStore,
    cfg: &DistillConfig,
    on_epoch: &mut Option<EpochHook>,
) -> Result<DistillReport> {
    let profile = compute_timestep_profile(teacher, student, store, cfg.probes_per_timestep)?;
    let div = |t: usize| {
        if cfg.normalize_loss {
            profile.divisor(t)
        } else {
            1.0
        }
    };
    let alpha = match cfg.alpha {
        Alpha::Value(a) => a,
        Alpha::Auto(_) => auto_alpha(
            teacher,
            student,
            &probe_samples(store, cfg.probes_per_timestep),
            &div,
        )?,
    };
    let mut state = OptimizerState::new(student);
    let mut rng = SeededRng::new(cfg.seed).derive(0x5eed);
    let el = epoch_len(store, cfg.strategy, cfg.batch_size);
    let mut epoch = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut changed = 0;
    for step in 0..cfg.steps {
        let batch = sample_batch(
            store,
            cfg.strategy,
            Some(&profile),
            step,
            cfg.batch_size,
            &mut rng,
        )?;
        if batch.epoch_boundary {
            epoch += 1;
            if cfg.invalidate_momentum && cfg.strategy == Strategy::TrajectoryAware {
                invalidate_momentum(&mut state);
            }
        }
        let samples: Vec<Sample> = batch
            .indices
            .iter()
            .flat_map(|&i| replays(store, i))
            .collect();
        let passes = samples
            .par_iter()
            .map(|(x, t, c)| {
                let (to, tf) = teacher.forward(x, *t, *c)?;
                let tr = student.forward_traced(x, *t, *c)?;
                Ok((to, tf, tr))
            })
            .collect::<Result<Vec<_>>>()?;
        let divisors: Vec<f64> = samples.iter().map(|s| div(s.1)).collect();
        let (to, tf): (Vec<_>, Vec<_>) = passes.iter().map(|p| (p.0.clone(), p.1.clone())).unzip();
        let so: Vec<Tensor> = passes.iter().map(|p| p.2.output.clone()).collect();
        let sf: Vec<Vec<Tensor>> = passes.iter().map(|p| p.2.features.clone()).collect();
        let terms = distill_loss(&to, &so, &tf, &sf, alpha, &divisors)?;
        if !terms.loss.is_finite() {
            let ts: Vec<usize> = samples.iter().map(|s| s.1).collect();
            return Err(Error::Training(format!(
                "non-finite distillation loss at step {step} (records {:?}, timesteps {ts:?}, output {}, feature {}, alpha {alpha})",
                batch.indices, terms.output, terms.feature
            )));
        }
        let grads = passes
            .par_iter()
            .zip(terms.d_out.par_iter().zip(terms.d_feats.par_iter()))
            .map(|(p, (d, df))| student.model.backward(&p.2, d, Some(df)))
            .collect::<Result<Vec<_>>>()?;
        let mut dw: BTreeMap<usize, Tensor> = BTreeMap::new();
        for &l in student.layers.keys() {
            let mut acc = grads[0].weights[l].clone();
            for g in &grads[1..] {
                acc.add_assign(&g.weights[l])?;
            }
            dw.insert(l, acc);
        }
        let lr = cfg.lr_cont(step);
        let st = pv_step(
            student,
            &dw,
            &mut state,
            &PvParams {
                lr_cont: lr,
                lr_disc: cfg.lr_disc,
                tau: cfg.tau,
                beam: cfg.beam,
                discrete: true,
            },
        )?;
        changed += st.groups_changed;
        log.push(LogRow {
            step,
            epoch,
            raw_loss: terms.raw_output,
            normalized_loss: terms.output,
            feature_loss: terms.feature,
            lr_cont: lr,
        });
        if (step + 1) % el == 0 {
            if let Some(h) = on_epoch.as_mut() {
                h((step + 1) / el, student)?;
            }
        }
    }
    Ok(DistillReport {
        log,
        profile,
        alpha,
        groups_changed: changed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aq::{calibrate_layer, CalibConfig, Gram, GroupLayout};
    use crate::nn::LayerKind;
    use crate::quantized::tests::small_quantized;
    use crate::trajectory::generate_trajectories;

    fn store(qm: &QuantizedModel, n: usize, steps: usize, cfg_scale: f32) -> TrajectoryStore {
        let sched =
            crate::diffusion::NoiseSchedule::from_config(&qm.model.config().schedule).unwrap();
        generate_trajectories(&qm.model, &sched, n, steps, cfg_scale, 4, 3, None).unwrap()
    }

    #[test]
    fn trajectory_aware_replays_in_order_and_flags_epochs() {
        let (_, qm) = small_quantized(1, 1);
        let s = store(&qm, 2, 5, 1.0);
        let mut rng = SeededRng::new(0);
        let mut ts = Vec::new();
        for step in 0..5 {
            let b = sample_batch(&s, Strategy::TrajectoryAware, None, step, 1, &mut rng).unwrap();
            assert!(!b.epoch_boundary);
            assert_eq!(b.indices.len(), 1);
            assert_eq!(s.records()[b.indices[0]].traj_id, 0);
            ts.push(s.records()[b.indices[0]].t);
        }
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let b = sample_batch(&s, Strategy::TrajectoryAware, None, 5, 1, &mut rng).unwrap();
        assert!(b.epoch_boundary);
        assert_eq!(s.records()[b.indices[0]].traj_id, 1);
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        let (_, qm) = small_quantized(2, 1);
        let s = store(&qm, 2, 5, 1.0);
        let mut rng = SeededRng::new(1);
        let mut counts = vec![0usize; s.len()];
        let draws = 100_000;
        for step in 0..draws / 4 {
            for i in sample_batch(&s, Strategy::RandomUniform, None, step, 4, &mut rng)
                .unwrap()
                .indices
            {
                counts[i] += 1;
            }
        }
        let p = 1.0 / s.len() as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - draws as f64 * p).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - draws as f64 * p).powi(2) / (draws as f64 * p))
            .sum();
        // df = 9; mean 9, sd sqrt(18).
        assert!(chi2 < 9.0 + 3.0 * 18f64.sqrt(), "{chi2}");
    }

    #[test]
    fn weighted_sampling_follows_concentrated_profile() {
        let (_, qm) = small_quantized(3, 1);
        let s = store(&qm, 3, 5, 1.0);
        let ts = s.timesteps();
        let mut p = TimestepLossProfile::uniform(ts.clone());
        p.weights = ts
            .iter()
            .map(|&t| if t == 0 { 0.999 } else { 0.00025 })
            .collect();
        let mut rng = SeededRng::new(4);
        let mut at0 = 0;
        for step in 0..1000 {
            let b =
                sample_batch(&s, Strategy::RandomWeighted, Some(&p), step, 1, &mut rng).unwrap();
            at0 += (s.records()[b.indices[0]].t == 0) as usize;
        }
        assert!(at0 >= 950, "{at0}");
    }

    #[test]
    fn loss_zero_at_identity_and_alpha_zero_is_output_only() {
        let mut rng = SeededRng::new(5);
        let a = vec![Tensor::<f32>::randn(&[2, 3], 1.0, &mut rng)];
        let f = vec![vec![Tensor::randn(&[4], 1.0, &mut rng)]];
        let l = distill_loss(&a, &a, &f, &f, 1.0, &[2.0]).unwrap();
        assert_eq!(l.loss, 0.0);
        let b = vec![Tensor::randn(&[2, 3], 1.0, &mut rng)];
        let g = vec![vec![Tensor::randn(&[4], 1.0, &mut rng)]];
        let l = distill_loss(&a, &b, &f, &g, 0.0, &[2.0]).unwrap();
        assert_eq!(l.loss, a[0].sq_dist(&b[0]).unwrap() / 2.0);
        assert!(l.d_feats[0][0].data().iter().all(|&v| v == 0.0));
        assert!(distill_loss(&a, &b, &f, &[vec![]], 0.0, &[1.0]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(6);
        let b = 3;
        let mk = |s: &[usize], rng: &mut SeededRng| Tensor::<f64>::from_fn(s, |_| rng.normal_f64());
        let to: Vec<_> = (0..b).map(|_| mk(&[2, 2], &mut rng)).collect();
        let so: Vec<_> = (0..b).map(|_| mk(&[2, 2], &mut rng)).collect();
        let tf: Vec<_> = (0..b)
            .map(|_| vec![mk(&[3], &mut rng), mk(&[2], &mut rng)])
            .collect();
        let sf: Vec<_> = (0..b)
            .map(|_| vec![mk(&[3], &mut rng), mk(&[2], &mut rng)])
            .collect();
        let div = [0.5, 2.0, 3.0];
        let alpha = 0.7;
        let l = distill_loss(&to, &so, &tf, &sf, alpha, &div).unwrap();
        let eps = 1e-3;
        for i in 0..b {
            for k in 0..4 {
                let mut p = so.clone();
                p[i].data_mut()[k] += eps;
                let mut m = so.clone();
                m[i].data_mut()[k] -= eps;
                let fd = (distill_loss(&to, &p, &tf, &sf, alpha, &div).unwrap().loss
                    - distill_loss(&to, &m, &tf, &sf, alpha, &div).unwrap().loss)
                    / (2.0 * eps);
                let an = l.d_out[i].data()[k];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "{fd} {an}");
                let want = 2.0 * (so[i].data()[k] - to[i].data()[k]) / div[i] / b as f64;
                assert!((an - want).abs() <= 1e-12);
            }
            for j in 0..2 {
                let mut p = sf.clone();
                p[i][j].data_mut()[0] += eps;
                let mut m = sf.clone();
                m[i][j].data_mut()[0] -= eps;
                let fd = (distill_loss(&to, &so, &tf, &p, alpha, &div).unwrap().loss
                    - distill_loss(&to, &so, &tf, &m, alpha, &div).unwrap().loss)
                    / (2.0 * eps);
                let an = l.d_feats[i][j].data()[0];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "{fd} {an}");
            }
        }
    }

    #[test]
    fn alpha_ratio_rule() {
        assert_eq!(alpha_ratio(3.0, 3.0), 1.0);
        assert_eq!(alpha_ratio(1.0, 10.0), 0.1);
        assert_eq!(alpha_ratio(1.0, 0.0), 0.0);
        assert_eq!(alpha_ratio(1e9, 1e-9), ALPHA_RANGE.1);
    }

    #[test]
    fn profile_of_identical_student_falls_back_to_uniform() {
        let (teacher, _) = small_quantized(7, 1);
        let same = QuantizedModel::new(&teacher, BTreeMap::new(), None).unwrap();
        let s = store(&same, 2, 4, 1.0);
        let p = compute_timestep_profile(&teacher, &same, &s, 2).unwrap();
        assert!(p.degenerate);
        assert!(p.divisors.iter().all(|&d| d == 1.0));
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn profile_weights_sum_to_one() {
        let (teacher, qm) = small_quantized(8, 1);
        let s = store(&qm, 3, 5, 2.0);
        let p = compute_timestep_profile(&teacher, &qm, &s, 3).unwrap();
        assert!(!p.degenerate);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.mean_loss.iter().all(|&l| l > 0.0));
    }

    /// Records at every timestep, split into a probe half and a fresh half.
    fn halves(s: &TrajectoryStore, k: usize) -> (Vec<Sample>, Vec<Sample>) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for t in s.timesteps() {
            let idx = s.indices_at(t);
            a.extend(idx[..k].iter().flat_map(|&i| replays(s, i)));
            b.extend(idx[k..2 * k].iter().flat_map(|&i| replays(s, i)));
        }
        (a, b)
    }

    #[test]
    fn normalized_loss_is_near_one_on_fresh_records() {
        let (teacher, qm) = small_quantized(17, 1);
        let s = store(&qm, 16, 5, 2.0);
        let p = compute_timestep_profile(&teacher, &qm, &s, 8).unwrap();
        let (_, fresh) = halves(&s, 8);
        for &t in &p.timesteps {
            let at: Vec<Sample> = fresh.iter().filter(|x| x.1 == t).cloned().collect();
            let l = output_terms(&teacher, &qm, &at).unwrap();
            let r = l.iter().sum::<f64>() / l.len() as f64 / p.divisor(t);
            assert!((0.5..=2.0).contains(&r), "t={t} ratio {r}");
        }
    }

    #[test]
    fn auto_alpha_balances_terms_on_fresh_probes() {
        let (teacher, qm) = small_quantized(18, 1);
        let s = store(&qm, 16, 5, 2.0);
        let p = compute_timestep_profile(&teacher, &qm, &s, 8).unwrap();
        let div = |t: usize| p.divisor(t);
        let (probe, fresh) = halves(&s, 8);
        let alpha = auto_alpha(&teacher, &qm, &probe, &div).unwrap();
        assert!(alpha > 0.0);
        let (mut out, mut feat) = (0.0, 0.0);
        for (x, t, c) in &fresh {
            let (a, fa) = teacher.forward(x, *t, *c).unwrap();
            let (b, fb) = qm.forward(x, *t, *c).unwrap();
            out += a.sq_dist(&b).unwrap() / div(*t);
            feat += fa
                .iter()
                .zip(&fb)
                .map(|(p, q)| p.sq_dist(q).unwrap())
                .sum::<f64>();
        }
        let r = out / (alpha * feat);
        assert!((0.2..=5.0).contains(&r), "{r}");
    }

    fn zero_grads(qm: &QuantizedModel) -> BTreeMap<usize, Tensor> {
        qm.layers
            .iter()
            .map(|(&l, q)| (l, Tensor::zeros(&q.layout.shape)))
            .collect()
    }

    fn params(lr_cont: f64, lr_disc: f64, tau: f64, discrete: bool) -> PvParams {
        PvParams {
            lr_cont,
            lr_disc,
            tau,
            beam: 4,
            discrete,
        }
    }

    #[test]
    fn zero_gradient_step_leaves_student_unchanged() {
        let (_, mut qm) = small_quantized(9, 2);
        let before = qm.clone();
        let mut st = OptimizerState::new(&qm);
        let dw = zero_grads(&qm);
        let s = pv_step(&mut qm, &dw, &mut st, &params(1e-2, 1.0, 1.0, true)).unwrap();
        assert_eq!(s.groups_changed, 0);
        assert_eq!(qm, before);
    }

    #[test]
    fn tiny_tau_changes_at_most_one_group_per_layer() {
        let (_, mut qm) = small_quantized(10, 1);
        let before = qm.clone();
        let mut rng = SeededRng::new(11);
        let dw: BTreeMap<usize, Tensor> = qm
            .layers
            .iter()
            .map(|(&l, q)| (l, Tensor::randn(&q.layout.shape, 10.0, &mut rng)))
            .collect();
        let mut st = OptimizerState::new(&qm);
        let s = pv_step(&mut qm, &dw, &mut st, &params(1e-9, 1.0, 1e-9, true)).unwrap();
        assert_eq!(s.groups_considered, qm.layers.len());
        for (l, q) in &qm.layers {
            let b = &before.layers[l];
            let diff = (0..q.n_groups())
                .filter(|&i| q.group_codes(i) != b.group_codes(i))
                .count();
            assert!(diff <= 1);
        }
    }

    #[test]
    fn discrete_phase_never_increases_local_objective() {
        let mut rng = SeededRng::new(12);
        for m in 1..=2 {
            let (_, qm) = small_quantized(13 + m as u64, m);
            for q in qm.layers.values() {
                let mut q = q.clone();
                let old = q.reconstruct_groups();
                let gg = Tensor::randn(&[q.n_groups(), q.layout.g], 1.0, &mut rng);
                for (_, before, after) in requantize_layer(&mut q, &old, &gg, 0.3, 0.5, 4) {
                    assert!(after <= before);
                }
            }
        }
    }

    #[test]
    fn invalidation_is_idempotent_and_matches_fresh_state() {
        let (_, mut qm) = small_quantized(14, 1);
        let mut rng = SeededRng::new(15);
        let dw: BTreeMap<usize, Tensor> = qm
            .layers
            .iter()
            .map(|(&l, q)| (l, Tensor::randn(&q.layout.shape, 1.0, &mut rng)))
            .collect();
        let mut st = OptimizerState::new(&qm);
        pv_step(&mut qm, &dw, &mut st, &params(1e-3, 0.0, 1.0, false)).unwrap();
        assert!(st.norm() > 0.0);
        invalidate_momentum(&mut st);
        assert_eq!(st.norm(), 0.0);
        let once = st.clone();
        invalidate_momentum(&mut st);
        assert_eq!(
            (st.moments.clone(), st.step),
            (once.moments.clone(), once.step)
        );
        let mut a = qm.clone();
        let mut b = qm.clone();
        let mut fresh = OptimizerState::new(&qm);
        pv_step(&mut a, &dw, &mut st, &params(1e-3, 0.0, 1.0, false)).unwrap();
        pv_step(&mut b, &dw, &mut fresh, &params(1e-3, 0.0, 1.0, false)).unwrap();
        assert_eq!(a, b);
    }

    /// `‖(Ŵ − W*)A‖² / n` for a single linear layer.
    fn linear_loss(q: &QuantizedLayer, w_star: &Tensor, a: &Tensor) -> (f64, Tensor) {
        let e = q.reconstruct().sub(w_star).unwrap();
        let n = a.shape()[1] as f64;
        let r = crate::tensor::matmul(&e, a).unwrap();
        let g = crate::tensor::matmul(&r, &a.transpose2d().unwrap())
            .unwrap()
            .scale((2.0 / n) as f32);
        (r.sum_sq() / n, g)
    }

    #[test]
    fn joint_step_beats_continuous_only_on_linear_toy() {
        let mut wins = Vec::new();
        for seed in 0..20 {
            let mut rng = SeededRng::new(100 + seed);
            let w_star = Tensor::randn(&[8, 16], 1.0, &mut rng);
            let a = Tensor::randn(&[16, 64], 1.0, &mut rng);
            let cc = CalibConfig {
                n_bits: 4,
                max_rounds: 1,
                cb_steps: 1,
                ..Default::default()
            };
            let layout = GroupLayout::for_kind(LayerKind::Linear, &[8, 16]).unwrap();
            let q = calibrate_layer(
                "l",
                LayerKind::Linear,
                &w_star,
                &Gram::identity(16),
                1,
                &cc,
                &mut rng,
            )
            .unwrap();
            assert_eq!(q.layout, layout);
            let (_, grad) = linear_loss(&q, &w_star, &a);
            let run = |discrete: bool| {
                let mut m = BTreeMap::new();
                m.insert(0usize, q.clone());
                let mut moments = BTreeMap::new();
                moments.insert(0usize, vec![Moments::new(q.codebooks[0].len())]);
                let mut st = OptimizerState {
                    moments,
                    adam: AdamConfig::default(),
                    step: 0,
                    epoch: 0,
                };
                let mut q2 = q.clone();
                let old = q2.reconstruct_groups();
                let grads = codebook_grads(&q2, &grad).unwrap();
                st.step += 1;
                st.moments.get_mut(&0).unwrap()[0].step(
                    &st.adam,
                    q2.codebooks[0].data_mut(),
                    grads[0].data(),
                    1e-3,
                    1,
                );
                if discrete {
                    let gg = q2.layout.gather(&grad).unwrap();
                    requantize_layer(&mut q2, &old, &gg, 0.005, 1.0, 4);
                }
                linear_loss(&q2, &w_star, &a).0
            };
            let (p_only, pv) = (run(false), run(true));
            wins.push(pv - p_only);
        }
        wins.sort_by(f64::total_cmp);
        assert!(wins[10] <= 0.0, "{wins:?}");
    }

    #[test]
    fn zero_steps_leave_student_unchanged_and_runs_are_deterministic() {
        let (teacher, qm) = small_quantized(16, 1);
        let s = store(&qm, 2, 4, 2.0);
        let mut a = qm.clone();
        let cfg = DistillConfig {
            steps: 0,
            probes_per_timestep: 1,
            ..Default::default()
        };
        let r = run_distillation(&teacher, &mut a, &s, &cfg, None).unwrap();
        assert!(r.log.is_empty());
        assert_eq!(a, qm);
        let cfg = DistillConfig {
            steps: 6,
            probes_per_timestep: 1,
            strategy: Strategy::TrajectoryAware,
            invalidate_momentum: true,
            lr_cont_start: 1e-3,
            lr_cont_end: 1e-4,
            ..Default::default()
        };
        let mut b = qm.clone();
        let mut c = qm.clone();
        let mut epochs = Vec::new();
        let mut hook = |e: usize, _: &QuantizedModel| {
            epochs.push(e);
            Ok(())
        };
        let rb = run_distillation(&teacher, &mut b, &s, &cfg, Some(&mut hook)).unwrap();
        let rc = run_distillation(&teacher, &mut c, &s, &cfg, None).unwrap();
        assert_eq!(rb, rc);
        assert_eq!(b, c);
        assert_ne!(b, qm);
        assert_eq!(epochs, vec![1]);
        assert_eq!(
            rb.log.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 0, 0, 0, 1, 1]
        );
    }

    #[test]
    fn log_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let row = LogRow {
            step: 3,
            epoch: 1,
            raw_loss: 0.5,
            normalized_loss: 1.25,
            feature_loss: 2.0,
            lr_cont: 1e-4,
        };
        write_log_csv(&p, &[row]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("step,epoch,raw_loss,normalized_loss,feature_loss,lr_cont")
        );
        assert_eq!(lines.next(), Some("3,1,0.5,1.25,2.0,0.0001"));
    }

    #[test]
    fn config_round_trips_with_auto_alpha() {
        let c = DistillConfig::default();
        let j = serde_json::to_string(&c).unwrap();
        assert!(j.contains("\"alpha\":\"auto\""));
        assert_eq!(serde_json::from_str::<DistillConfig>(&j).unwrap(), c);
        let v: DistillConfig = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        assert_eq!(v.alpha, Alpha::Value(0.5));
        assert!(DistillConfig { tau: 0.0, ..c }.validate().is_err());
    }
}
