//! Noise schedule, forward diffusion and the x̂₀-parameterized reverse step.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ₀ = 1`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    /// The usual 1000-step range `[1e-4, 0.02]` scaled by 1000/T so that
    /// `ᾱ_T ≈ 0` still holds at T = 100.
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `ᾱ_{t−1}` per step, with `ᾱ₀ = 1`.
    pub alpha_bar_prev: Vec<f64>,
    pub posterior_variance: Vec<f64>,
    /// Denoiser timestep fed to the model at each schedule step. Identity
    /// for a base schedule, a subsequence for a respaced one.
    pub model_timesteps: Vec<usize>,
}

pub fn make_schedule(params: &ScheduleParams) -> Result<NoiseSchedule> {
    let ScheduleParams {
        steps,
        beta_start,
        beta_end,
        kind,
    } = *params;
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be ≥ 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Schedule from explicit betas in `[0, 1)`; zero betas are allowed so
    /// that degenerate noiseless schedules can be built for testing.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DiffusionError::InvalidSchedule("no steps".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        let steps = beta.len();
        Self::build(beta, (1..=steps).collect())
    }

    fn build(beta: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let alpha_bar_prev: Vec<f64> = std::iter::once(1.0)
            .chain(alpha_bar.iter().copied())
            .take(beta.len())
            .collect();
        let posterior_variance = beta
            .iter()
            .zip(&alpha_bar)
            .zip(&alpha_bar_prev)
            .map(|((b, ab), abp)| {
                if 1.0 - ab > 0.0 {
                    b * (1.0 - abp) / (1.0 - ab)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            alpha_bar_prev,
            posterior_variance,
            model_timesteps,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(t - 1)
    }

    /// `ᾱ_t` with `ᾱ₀ = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.check_t(t)?;
        let denom = 1.0 - self.alpha_bar[i];
        if denom <= 0.0 {
            // Noiseless step: the posterior collapses onto x_t.
            return Ok((0.0, 1.0));
        }
        let c0 = self.alpha_bar_prev[i].sqrt() * self.beta[i] / denom;
        let ct = self.alpha[i].sqrt() * (1.0 - self.alpha_bar_prev[i]) / denom;
        Ok((c0, ct))
    }

    /// Evenly spaced sub-schedule with `steps` steps ending at `T`; betas are
    /// recomputed so that every kept step has the same `ᾱ` as the original.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(DiffusionError::InvalidSchedule(format!(
                "respacing to {steps} steps of a {total}-step schedule"
            )));
        }
        if steps == total {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (1..=steps)
            .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
            .collect();
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(steps);
        for &t in &kept {
            let ab = self.alpha_bar_at(t);
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let model_timesteps = kept.iter().map(|t| self.model_timesteps[t - 1]).collect();
        Self::build(beta, model_timesteps)
    }
}

pub fn standard_normal(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// One step of the forward chain, `q(x_t | x_{t−1})`.
pub fn forward_diffuse_step(
    x_prev: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let i = schedule.check_t(t)?;
    let beta = schedule.beta[i];
    let eps = standard_normal(x_prev.dim(), rng);
    Ok(x_prev * (1.0 - beta).sqrt() + eps * beta.sqrt())
}

/// Closed-form `q(x_t | x₀)`.
pub fn forward_diffuse_closed(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    let eps = standard_normal(x0.dim(), rng);
    Ok(diffuse_with_noise(x0, &eps, t, schedule))
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε` for a given noise draw; `t = 0` returns `x₀`.
pub fn diffuse_with_noise(x0: &Array2<f64>, eps: &Array2<f64>, t: usize, schedule: &NoiseSchedule) -> Array2<f64> {
    if t == 0 {
        return x0.clone();
    }
    let ab = schedule.alpha_bar_at(t);
    x0 * ab.sqrt() + eps * (1.0 - ab).sqrt()
}

/// Posterior mean of `x_{t−1}` given `x_t` and a predicted `x̂₀`.
pub fn posterior_mean(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x_t.dim() != x0_hat.dim() {
        return Err(DiffusionError::ShapeMismatch(x_t.dim(), x0_hat.dim()));
    }
    let (c0, ct) = schedule.posterior_coefficients(t)?;
    Ok(x0_hat * c0 + x_t * ct)
}

/// Samples `x_{t−1}`; the final step (`t = 1`) returns the mean.
pub fn posterior_step(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let mean = posterior_mean(x_t, x0_hat, t, schedule)?;
    if t == 1 {
        return Ok(mean);
    }
    let var = schedule.posterior_variance[t - 1];
    let eps = standard_normal(x_t.dim(), rng);
    Ok(mean + eps * var.sqrt())
}
