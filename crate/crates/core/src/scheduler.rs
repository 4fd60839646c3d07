//! Deterministic DDIM arithmetic (η = 0).
//!
//! Latents live on a grid `z_0 … z_T`. Grid index `0` is the clean end with
//! `ᾱ = 1`; grid index `i ≥ 1` sits on native training timestep
//! `(i - 1) * stride + steps_offset` ("leading" spacing).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::LatentImage;

/// `ᾱ` table and timestep grid for one DDIM run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    model_timesteps: Vec<usize>,
}

/// Cumulative products of `1 - β` for the "scaled linear" β schedule used by
/// latent diffusion checkpoints (`β` linear in `sqrt` space).
pub fn scaled_linear_alphas(beta_start: f64, beta_end: f64, train_steps: usize) -> Vec<f64> {
    let (lo, hi) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
    let mut acc = 1.0f64;
    (0..train_steps)
        .map(|i| {
            let frac = if train_steps > 1 {
                i as f64 / (train_steps - 1) as f64
            } else {
                0.0
            };
            let b = lo + (hi - lo) * frac;
            acc *= 1.0 - b * b;
            acc
        })
        .collect()
}

/// Builds a `num_steps`-step grid over `native_alphas` with no step offset.
pub fn build_schedule(num_steps: usize, native_alphas: &[f64]) -> Result<NoiseSchedule> {
    build_schedule_with_offset(num_steps, native_alphas, 0)
}

pub fn build_schedule_with_offset(
    num_steps: usize,
    native_alphas: &[f64],
    steps_offset: usize,
) -> Result<NoiseSchedule> {
    let native = native_alphas.len();
    if num_steps < 1 {
        return Err(Error::Schedule("num_steps must be at least 1".into()));
    }
    if num_steps > native {
        return Err(Error::Schedule(format!(
            "num_steps {num_steps} exceeds native schedule length {native}"
        )));
    }
    let stride = native / num_steps;
    let mut alpha_bar = Vec::with_capacity(num_steps + 1);
    let mut model_timesteps = Vec::with_capacity(num_steps + 1);
    alpha_bar.push(1.0);
    model_timesteps.push(0);
    for i in 1..=num_steps {
        let tau = (i - 1) * stride + steps_offset;
        if tau >= native {
            return Err(Error::Schedule(format!(
                "timestep {tau} outside native schedule of {native}"
            )));
        }
        alpha_bar.push(native_alphas[tau]);
        model_timesteps.push(tau);
    }
    NoiseSchedule::from_parts(alpha_bar, model_timesteps)
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit `ᾱ` table over grid indices `0..=T`.
    pub fn from_parts(alpha_bar: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule("need at least one step".into()));
        }
        if alpha_bar.len() != model_timesteps.len() {
            return Err(Error::Schedule(format!(
                "{} alphas for {} timesteps",
                alpha_bar.len(),
                model_timesteps.len()
            )));
        }
        for (i, a) in alpha_bar.iter().enumerate() {
            if !(*a > 0.0 && *a <= 1.0) {
                return Err(Error::Schedule(format!("ᾱ[{i}] = {a} outside (0, 1]")));
            }
        }
        if let Some(i) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!(
                "ᾱ not strictly decreasing at grid index {}",
                i + 1
            )));
        }
        Ok(Self {
            alpha_bar,
            model_timesteps,
        })
    }

    /// Number of DDIM steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Native training timestep the noise predictor is conditioned on at grid index `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t]
    }

    pub fn model_timesteps(&self) -> &[usize] {
        &self.model_timesteps
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Schedule(format!("grid index {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }
}

/// Clean-sample estimate `(z - sqrt(1 - ᾱ_t) ε) / sqrt(ᾱ_t)`.
pub fn predict_x0(z: &LatentImage, eps: &LatentImage, t: usize, sched: &NoiseSchedule) -> Result<LatentImage> {
    sched.check_index(t)?;
    let a = sched.alpha_bar(t);
    if a <= 0.0 {
        return Err(Error::Schedule(format!("ᾱ at grid index {t} is zero")));
    }
    let inv = 1.0 / libm::sqrt(a);
    z.axpby(inv as f32, eps, (-libm::sqrt(1.0 - a) * inv) as f32)
}

/// Moves `z` from noise level `from` to `to` along the deterministic DDIM path
/// defined by `eps`: `sqrt(ᾱ_to) f(z) + sqrt(1 - ᾱ_to) ε`.
fn transition(
    z: &LatentImage,
    eps: &LatentImage,
    from: usize,
    to: usize,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    let a_from = sched.alpha_bar(from);
    let a_to = sched.alpha_bar(to);
    let ratio = libm::sqrt(a_to / a_from);
    let c_z = ratio;
    let c_e = libm::sqrt(1.0 - a_to) - ratio * libm::sqrt(1.0 - a_from);
    z.axpby(c_z as f32, eps, c_e as f32)
}

/// One DDIM sampling step `z_t → z_{t-1}`.
pub fn sample_step(z_t: &LatentImage, eps: &LatentImage, t: usize, sched: &NoiseSchedule) -> Result<LatentImage> {
    sched.check_index(t)?;
    if t == 0 {
        return Err(Error::GridEdge {
            t,
            steps: sched.steps(),
            direction: "predecessor",
        });
    }
    transition(z_t, eps, t, t - 1, sched)
}

/// One DDIM inversion step `z_t → z_{t+1}`.
pub fn invert_step(z_t: &LatentImage, eps: &LatentImage, t: usize, sched: &NoiseSchedule) -> Result<LatentImage> {
    sched.check_index(t)?;
    if t >= sched.steps() {
        return Err(Error::GridEdge {
            t,
            steps: sched.steps(),
            direction: "successor",
        });
    }
    transition(z_t, eps, t, t + 1, sched)
}
