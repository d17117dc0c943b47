//! Cosine noise schedule and the closed forms of the forward and reverse
//! processes.
//!
//! Step indices follow the diffusion convention `k = 1..=K`; `alpha_bar`
//! additionally stores `alpha_bar[0] = 1`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_CLIP: f64 = 3.0;

/// Construction parameters; enough to rebuild a schedule bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub cosine_offset: f64,
    /// Elementwise bound on predicted clean samples; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            clip: Some(DEFAULT_CLIP),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = cosine_schedule(self.steps, self.cosine_offset)?;
        s.clip = self.clip;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    clip: Option<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    sigma: Vec<f64>,
}

/// Cosine schedule: `alpha_bar(k) = f(k) / f(0)` with
/// `f(k) = cos^2(((k/K + s) / (1 + s)) * pi/2)`, betas clipped at
/// [`MAX_BETA`]. The stored `alpha_bar` is the running product of the
/// clipped betas.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("noise schedule needs at least one step"));
    }
    if !(offset > 0.0) {
        return Err(Error::config(format!("cosine offset must be positive, got {offset}")));
    }
    let k_total = steps as f64;
    let f = |k: usize| {
        let x = ((k as f64 / k_total + offset) / (1.0 + offset)) * FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prev_target = 1.0;
    for k in 1..=steps {
        let target = f(k) / f0;
        let b = (1.0 - target / prev_target).min(MAX_BETA);
        prev_target = target;
        beta.push(b);
        let prev = alpha_bar[k - 1];
        alpha_bar.push(prev * (1.0 - b));
    }
    let beta_tilde: Vec<f64> = (1..=steps)
        .map(|k| (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k - 1])
        .collect();
    let sigma = beta_tilde.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        steps,
        offset,
        clip: Some(DEFAULT_CLIP),
        beta,
        alpha_bar,
        beta_tilde,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            cosine_offset: self.offset,
            clip: self.clip,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        self.clip
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            return Err(Error::config(format!(
                "diffusion step {k} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Forward variance `beta^k`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta[k - 1]
    }

    /// `alpha_bar^k`, defined for `k = 0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// Posterior variance `beta_tilde^k`.
    pub fn beta_tilde(&self, k: usize) -> f64 {
        self.beta_tilde[k - 1]
    }

    /// Reverse-process standard deviation `sqrt(beta_tilde^k)`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k - 1]
    }

    /// Coefficients `(c0, ck)` of the posterior mean
    /// `c0 * x0 + ck * xk`.
    pub fn posterior_coefficients(&self, k: usize) -> (f64, f64) {
        let ab = self.alpha_bar[k];
        let ab_prev = self.alpha_bar[k - 1];
        let c0 = ab_prev.sqrt() * self.beta(k) / (1.0 - ab);
        let ck = self.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ck)
    }

    /// `sqrt(alpha_bar^k) x0 + sqrt(1 - alpha_bar^k) noise`.
    pub fn forward_sample(&self, x0: &Matrix, k: usize, noise: &Matrix) -> Result<Matrix> {
        self.check_step(k)?;
        let ab = self.alpha_bar[k];
        x0.axpby(ab.sqrt(), noise, (1.0 - ab).sqrt())
    }

    /// Mean of `q(x^{k-1} | x^k, x^0)`.
    pub fn posterior_mean(&self, xk: &Matrix, x0: &Matrix, k: usize) -> Result<Matrix> {
        self.check_step(k)?;
        let (c0, ck) = self.posterior_coefficients(k);
        x0.axpby(c0, xk, ck)
    }

    /// Clean-sample estimate implied by a noise prediction, clipped to the
    /// schedule's bound.
    pub fn x0_from_noise(&self, xk: &Matrix, k: usize, eps_hat: &Matrix) -> Result<Matrix> {
        self.check_step(k)?;
        let ab = self.alpha_bar[k];
        let inv = 1.0 / ab.sqrt();
        let mut x0 = xk.axpby(inv, eps_hat, -(1.0 - ab).sqrt() * inv)?;
        if let Some(c) = self.clip {
            x0 = x0.map(|v| v.clamp(-c, c));
        }
        Ok(x0)
    }
}
