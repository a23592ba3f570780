//! Teacher training on a synthetic class-conditional blob distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Grads, ModelConfig, ToyUNet};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, Moments};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub grad_clip: f64,
    /// Probability of replacing the class with the null class.
    pub cond_drop: f64,
    pub heldout: usize,
    /// Training fails if the final held-out MSE exceeds this.
    pub max_heldout_mse: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            lr_final: 2e-4,
            grad_clip: 1.0,
            cond_drop: 0.1,
            heldout: 256,
            max_heldout_mse: None,
        }
    }
}

const CENTERS: [[(f32, f32); 2]; 4] = [
    [(2.0, 2.0), (5.0, 5.0)],
    [(2.0, 5.0), (5.0, 2.0)],
    [(2.0, 2.0), (2.0, 5.0)],
    [(2.0, 2.0), (5.0, 2.0)],
];

const PALETTE: [[[f32; 4]; 2]; 4] = [
    [[1.0, 0.5, -0.5, 0.0], [0.0, -0.5, 0.5, 1.0]],
    [[-1.0, 0.5, 0.0, 0.5], [0.5, 0.0, -1.0, 0.5]],
    [[0.5, 1.0, 0.5, -0.5], [-0.5, 0.5, 1.0, 0.0]],
    [[0.0, -1.0, 0.5, 1.0], [1.0, 0.0, 0.5, -1.0]],
];

/// One 4x8x8 image of two Gaussian blobs whose placement and channel colours
/// depend on the class; position and amplitude are jittered.
pub fn synth_image(cls: usize, rng: &mut SeededRng) -> Tensor {
    let c = cls % CENTERS.len();
    let sigma = 1.3f32;
    let mut blobs = [(0.0f32, 0.0f32, 0.0f32); 2];
    for (b, blob) in blobs.iter_mut().enumerate() {
        let (cy, cx) = CENTERS[c][b];
        *blob = (
            cy + rng.uniform_range(-0.75, 0.75),
            cx + rng.uniform_range(-0.75, 0.75),
            rng.uniform_range(0.7, 1.3),
        );
    }
    Tensor::from_fn(&[4, 8, 8], |k| {
        let (ch, y, x) = (k / 64, (k / 8) % 8, k % 8);
        let mut v = 0.0;
        for (b, &(cy, cx, amp)) in blobs.iter().enumerate() {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            v += amp * PALETTE[c][b][ch] * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        v
    })
}

/// A fixed batch of noised samples with their true noise.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub x_t: Vec<Tensor>,
    pub t: Vec<usize>,
    pub cls: Vec<Option<usize>>,
    pub eps: Vec<Tensor>,
}

pub fn heldout_set(cfg: &ModelConfig, n: usize, rng: &mut SeededRng) -> Result<HeldOut> {
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut h = HeldOut {
        x_t: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        cls: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let c = rng.below(cfg.n_classes);
        let x0 = synth_image(c, rng);
        let t = rng.below(sched.len());
        let eps = Tensor::randn(&cfg.sample_shape(), 1.0, rng);
        h.x_t.push(forward_noise(&x0, t, &eps, &sched)?);
        h.t.push(t);
        h.cls.push(Some(c));
        h.eps.push(eps);
    }
    Ok(h)
}

/// Mean per-element noise-prediction MSE over a held-out set.
pub fn heldout_mse(model: &ToyUNet, h: &HeldOut) -> Result<f64> {
    let errs: Vec<f64> = (0..h.x_t.len())
        .into_par_iter()
        .map(|i| {
            let y = model.forward(&h.x_t[i], h.t[i], h.cls[i])?.0;
            y.mse(&h.eps[i])
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_heldout: f64,
    pub final_heldout: f64,
}

/// Trains a teacher from scratch with the noise-prediction MSE objective.
pub fn train_teacher(
    cfg: &ModelConfig,
    tc: &TeacherConfig,
    seed: u64,
) -> Result<(ToyUNet, TrainReport)> {
    let root = SeededRng::new(seed);
    let mut model = ToyUNet::init(cfg, &mut root.derive(1))?;
    let mut data = root.derive(2);
    let held = heldout_set(cfg, tc.heldout, &mut root.derive(3))?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let initial_heldout = heldout_mse(&model, &held)?;

    let adam = AdamConfig::default();
    let mut moments: Vec<Moments> = Grads::zeros_like(&model)
        .tensors()
        .map(|t| Moments::new(t.len()))
        .collect();
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let c = data.below(cfg.n_classes);
            let cls = if data.uniform_f64() < tc.cond_drop {
                None
            } else {
                Some(c)
            };
            let x0 = synth_image(c, &mut data);
            let t = data.below(sched.len());
            let eps = Tensor::randn(&cfg.sample_shape(), 1.0, &mut data);
            batch.push((forward_noise(&x0, t, &eps, &sched)?, t, cls, eps));
        }
        let scale = 2.0 / (batch[0].0.len() * batch.len()) as f32;
        let per: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|(x, t, cls, eps)| {
                let tr = model.forward_traced(x, *t, *cls, None)?;
                let loss = tr.output.mse(eps)?;
                let d = tr.output.sub(eps)?.scale(scale);
                Ok((loss, model.backward(&tr, &d, None)?))
            })
            .collect::<Result<_>>()?;
        let mut grads = Grads::zeros_like(&model);
        let mut loss = 0.0;
        for (l, g) in &per {
            loss += l / per.len() as f64;
            grads.add_assign(g)?;
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "teacher loss diverged at step {step}"
            )));
        }
        let norm = grads.norm();
        if norm > tc.grad_clip {
            let s = (tc.grad_clip / norm) as f32;
            grads.tensors_mut().for_each(|t| *t = t.scale(s));
        }
        let frac = if tc.steps > 1 {
            step as f64 / (tc.steps - 1) as f64
        } else {
            0.0
        };
        let lr = tc.lr + (tc.lr_final - tc.lr) * frac;
        for ((p, g), m) in model.params_with_grads(&grads).zip(moments.iter_mut()) {
            m.step(&adam, p.data_mut(), g.data(), lr, step as u64 + 1);
        }
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("teacher step {step} loss {loss:.5}");
        }
    }
    let final_heldout = heldout_mse(&model, &held)?;
    if let Some(thr) = tc.max_heldout_mse {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(final_heldout <= thr) {
            return Err(Error::Training(format!(
                "held-out MSE {final_heldout:.5} above threshold {thr}"
            )));
        }
    }
    Ok((
        model,
        TrainReport {
            losses,
            initial_heldout,
            final_heldout,
        },
    ))
}
