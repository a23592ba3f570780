//! Noise schedule, closed-form forward noising, deterministic DDIM updates and
//! classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Linear-beta schedule parameters, as stored in sidecars and configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Validation("empty beta schedule".into()));
        }
        if let Some((i, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::Validation(format!("beta[{i}] = {b} outside (0,1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        let beta = (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.t, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {})",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    noise_with_alpha_bar(x0, eps, sched.alpha_bar[t])
}

pub(crate) fn noise_with_alpha_bar(x0: &Tensor, eps: &Tensor, abar: f64) -> Result<Tensor> {
    let a = abar.sqrt() as f32;
    let s = (1.0 - abar).sqrt() as f32;
    if x0.shape() != eps.shape() {
        return dim_err(format!(
            "noise shape {:?} vs sample {:?}",
            eps.shape(),
            x0.shape()
        ));
    }
    Tensor::new(
        x0.shape().to_vec(),
        x0.data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| a * x + s * e)
            .collect(),
    )
}

/// One deterministic (eta = 0) DDIM update from `t` to `t_prev`;
/// `t_prev = None` is the final step and returns the predicted clean sample.
pub fn ddim_step(
    eps_pred: &Tensor,
    x_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check(t)?;
    if eps_pred.shape() != x_t.shape() {
        return dim_err("ddim_step: eps and sample shapes differ");
    }
    if let Some(tp) = t_prev {
        if tp > t {
            return Err(Error::Range(format!("non-monotone DDIM step {t} -> {tp}")));
        }
        if tp == t {
            return Ok(x_t.clone());
        }
    }
    let abar = sched.alpha_bar[t];
    let sa = abar.sqrt() as f32;
    let s1 = (1.0 - abar).sqrt() as f32;
    let x0: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| (x - s1 * e) / sa)
        .collect();
    let out = match t_prev {
        None => x0,
        Some(tp) => {
            let ap = sched.alpha_bar[tp];
            let pa = ap.sqrt() as f32;
            let p1 = (1.0 - ap).sqrt() as f32;
            x0.iter()
                .zip(eps_pred.data())
                .map(|(&x, &e)| pa * x + p1 * e)
                .collect()
        }
    };
    Tensor::new(x_t.shape().to_vec(), out)
}

/// `eps_uncond + scale · (eps_cond − eps_uncond)`, evaluated as
/// `(1 − scale)·eps_uncond + scale·eps_cond` so both endpoints are exact.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return dim_err("cfg_combine: shape mismatch");
    }
    Tensor::new(
        eps_cond.shape().to_vec(),
        eps_uncond
            .data()
            .iter()
            .zip(eps_cond.data())
            .map(|(&u, &c)| (1.0 - scale) * u + scale * c)
            .collect(),
    )
}

/// Evenly spaced descending timesteps for an `steps`-step sampler over a
/// `t_total`-step schedule; always ends at 0.
pub fn sampling_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(Error::Validation(format!(
            "cannot sample {steps} steps from a {t_total}-step schedule"
        )));
    }
    Ok((0..steps).rev().map(|i| i * t_total / steps).collect())
}

/// Anything that predicts noise from `(x_t, t, class)`; `None` is the null
/// (unconditional) class.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &Tensor, t: usize, cls: Option<usize>) -> Result<Tensor>;
    fn sample_shape(&self) -> Vec<usize>;
}

/// Noise prediction with classifier-free guidance. A scale of exactly 1 skips
/// the unconditional pass and exactly 0 skips the conditional one.
pub fn guided_eps(
    model: &dyn Denoiser,
    x_t: &Tensor,
    t: usize,
    cls: Option<usize>,
    cfg_scale: f32,
) -> Result<Tensor> {
    match cls {
        None => model.predict(x_t, t, None),
        Some(_) if cfg_scale == 1.0 => model.predict(x_t, t, cls),
        Some(_) if cfg_scale == 0.0 => model.predict(x_t, t, None),
        Some(_) => {
            let u = model.predict(x_t, t, None)?;
            let c = model.predict(x_t, t, cls)?;
            cfg_combine(&u, &c, cfg_scale)
        }
    }
}

/// One full DDIM run from Gaussian noise. Returns the final sample and the
/// model input `x_t` seen at every step, in denoising order.
pub fn ddim_sample(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    cls: Option<usize>,
    cfg_scale: f32,
    rng: &mut SeededRng,
) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
    let ts = sampling_timesteps(sched.len(), steps)?;
    let mut x = Tensor::randn(&model.sample_shape(), 1.0, rng);
    let mut inputs = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(model, &x, t, cls, cfg_scale)?;
        inputs.push((t, x.clone()));
        x = ddim_step(&eps, &x, t, ts.get(i + 1).copied(), sched)?;
        if !x.all_finite() {
            return Err(Error::Training(format!("non-finite sample at t={t}")));
        }
    }
    Ok((x, inputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = sched();
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn invalid_betas_rejected() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn forward_noise_at_unit_alpha_bar_is_identity() {
        let mut rng = SeededRng::new(1);
        let x0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 3], 1.0, &mut rng);
        assert_eq!(noise_with_alpha_bar(&x0, &eps, 1.0).unwrap(), x0);
    }

    #[test]
    fn forward_noise_zero_signal() {
        let mut rng = SeededRng::new(1);
        let x0 = Tensor::zeros(&[4]);
        let eps = Tensor::randn(&[4], 1.0, &mut rng);
        let xt = noise_with_alpha_bar(&x0, &eps, 0.25).unwrap();
        let s = 0.75f64.sqrt() as f32;
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert_eq!(*a, s * e);
        }
    }

    #[test]
    fn forward_noise_range_error() {
        let x = Tensor::zeros(&[1]);
        assert!(matches!(
            forward_noise(&x, 1000, &x, &sched()),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn stepwise_chain_matches_closed_form_moments() {
        // Monte-Carlo oracle: iterate q(x_t | x_{t-1}) and compare moments with
        // the closed form sqrt(abar) x0 and 1 - abar.
        let s = sched();
        let t = 200;
        let x0 = 3.0f64;
        let n = 10_000;
        let mut rng = SeededRng::new(77);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = x0;
            for k in 0..=t {
                x = (1.0 - s.beta()[k]).sqrt() * x + s.beta()[k].sqrt() * rng.normal_f64();
            }
            samples.push(x);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let abar = s.alpha_bar()[t];
        let want_mean = abar.sqrt() * x0;
        let want_var = 1.0 - abar;
        assert!(
            ((mean - want_mean) / want_mean).abs() < 0.02,
            "{mean} vs {want_mean}"
        );
        assert!(
            ((var - want_var) / want_var).abs() < 0.02,
            "{var} vs {want_var}"
        );
    }

    #[test]
    fn ddim_inverts_forward_noise_with_true_eps() {
        let s = sched();
        let mut rng = SeededRng::new(5);
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let xt = forward_noise(&x0, 500, &eps, &s).unwrap();
        let back = ddim_step(&eps, &xt, 500, None, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn ddim_same_timestep_is_noop() {
        let s = sched();
        let mut rng = SeededRng::new(6);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let e = Tensor::randn(&[5], 1.0, &mut rng);
        assert_eq!(ddim_step(&e, &x, 10, Some(10), &s).unwrap(), x);
        assert!(matches!(
            ddim_step(&e, &x, 10, Some(11), &s),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn cfg_combine_limits() {
        let mut rng = SeededRng::new(7);
        let u = Tensor::randn(&[6], 1.0, &mut rng);
        let c = Tensor::randn(&[6], 1.0, &mut rng);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let z = Tensor::zeros(&[6]);
        let g = cfg_combine(&z, &c, 7.5).unwrap();
        for (a, b) in g.data().iter().zip(c.data()) {
            assert_eq!(*a, 7.5 * b);
        }
        assert!(cfg_combine(&u, &Tensor::zeros(&[5]), 2.0).is_err());
    }

    #[test]
    fn timesteps_descend_to_zero() {
        let ts = sampling_timesteps(1000, 25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(ts[0], 960);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(sampling_timesteps(10, 11).is_err());
    }
}
