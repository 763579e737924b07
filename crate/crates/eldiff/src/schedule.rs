//! Diffusion noise schedule and the closed-form forward process.
//!
//! The schedule fixes, for each timestep `t` in `[0, T)`, the per-step
//! variance `beta[t]`, `alpha[t] = 1 - beta[t]`, the cumulative product
//! `alpha_bar[t]`, and the posterior variance used by ancestral sampling.
//! Construction follows the squared-cosine profile: `alpha_bar` is a ratio
//! of a squared cosine at `t+1` to its value at `0`, betas are derived from
//! consecutive ratios and clipped to `(0, 0.999]`, and `alpha_bar` is then
//! recomputed as the running product of the clipped alphas so the stored
//! arrays stay mutually consistent.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule with offset `s` (0.008 when unspecified).
    pub fn cosine(timesteps: usize, s: f64) -> Result<Self> {
        if timesteps < 1 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one timestep".into(),
            ));
        }
        if s <= 0.0 {
            return Err(Error::InvalidArgument("cosine offset must be positive".into()));
        }
        let t_f = timesteps as f64;
        let profile = |u: f64| {
            let angle = ((u / t_f + s) / (1.0 + s)) * FRAC_PI_2;
            angle.cos().powi(2)
        };
        let f0 = profile(0.0);

        let mut beta = Vec::with_capacity(timesteps);
        let mut prev_target = 1.0f64;
        for t in 0..timesteps {
            let target = profile((t + 1) as f64) / f0;
            let raw = 1.0 - target / prev_target;
            beta.push(raw.clamp(f64::MIN_POSITIVE, BETA_MAX));
            prev_target = target;
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut running = 1.0f64;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        let mut posterior_variance = Vec::with_capacity(timesteps);
        for t in 0..timesteps {
            let prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
            posterior_variance.push(beta[t] * (1.0 - prev) / (1.0 - alpha_bar[t]));
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range [0, {})",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// Writes the schedule as a text table: `t beta alpha_bar posterior_variance`.
    pub fn dump_table(&self) -> String {
        let mut out = String::from("t\tbeta\talpha_bar\tposterior_variance\n");
        for t in 0..self.timesteps() {
            out.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                t, self.beta[t], self.alpha_bar[t], self.posterior_variance[t]
            ));
        }
        out
    }
}

/// Closed-form noising: `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_marginal(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "forward_marginal: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    x0.scaled_add(ab.sqrt() as f32, eps, (1.0 - ab).sqrt() as f32)
}

/// One ancestral-sampling step from `x_t` to `x_{t-1}` given the predicted
/// noise. Deterministic at `t = 0`.
pub fn posterior_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "posterior_step: x_t {:?} vs eps_hat {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    let alpha = sched.alpha(t);
    let alpha_bar = sched.alpha_bar(t);
    let beta = sched.beta(t);
    let mean_scale = 1.0 / alpha.sqrt();
    let eps_coeff = beta / (1.0 - alpha_bar).sqrt();
    let mut mean = x_t.scaled_add(mean_scale as f32, eps_hat, (-mean_scale * eps_coeff) as f32)?;
    if t > 0 {
        let sigma = sched.posterior_variance(t).sqrt() as f32;
        let z = rng.normal_tensor(x_t.shape().to_vec());
        mean = mean.scaled_add(1.0, &z, sigma)?;
    }
    Ok(mean)
}
