//! v-objective diffusion on latent matrices: the linear σ grid with
//! trigonometric mixing coefficients, the forward process, the velocity
//! target and the training loss.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{LatentTensor, Tensor};

/// Equally spaced noise levels `σ_t = t / T` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

/// Velocity `α·ε − β·x0`, same shape as the latent it was derived from.
pub type VelocityTarget = Tensor;

impl NoiseSchedule {
    pub fn new(num_steps: usize) -> Result<Self> {
        ensure!(num_steps >= 1, "schedule needs at least one step");
        let sigmas = (0..=num_steps).map(|i| i as f64 / num_steps as f64).collect();
        Ok(Self { sigmas })
    }

    pub fn num_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.sigmas
            .get(t)
            .copied()
            .ok_or_else(|| crate::Error::invalid(format!("step {t} outside 0..={}", self.num_steps())))
    }

    /// `(cos(πσ_t/2), sin(πσ_t/2))`.
    pub fn alpha_beta(&self, t: usize) -> Result<(f64, f64)> {
        Ok(alpha_beta_at(self.sigma(t)?))
    }
}

pub fn make_schedule(num_steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(num_steps)
}

/// Mixing coefficients for an arbitrary noise level. The endpoints are exact.
pub fn alpha_beta_at(sigma: f64) -> (f64, f64) {
    if sigma == 0.0 {
        (1.0, 0.0)
    } else if sigma == 1.0 {
        (0.0, 1.0)
    } else {
        let phi = FRAC_PI_2 * sigma;
        (phi.cos(), phi.sin())
    }
}

fn mix(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    x.zip_map(y, |u, v| a * u + b * v)
}

/// `α_t·x0 + β_t·ε`.
pub fn forward_diffuse(x0: &LatentTensor, eps: &LatentTensor, schedule: &NoiseSchedule, t: usize) -> Result<LatentTensor> {
    let (a, b) = schedule.alpha_beta(t)?;
    mix(a, x0, b, eps)
}

/// `α_t·ε − β_t·x0`.
pub fn velocity_target(x0: &LatentTensor, eps: &LatentTensor, schedule: &NoiseSchedule, t: usize) -> Result<VelocityTarget> {
    let (a, b) = schedule.alpha_beta(t)?;
    mix(a, eps, -b, x0)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(v_hat: &VelocityTarget, v: &VelocityTarget) -> Result<f64> {
    v_hat.check_same_shape(v)?;
    if v.is_empty() {
        return Ok(0.0);
    }
    Ok(v_hat.sub(v)?.sum_sq() / v.len() as f64)
}

/// Recovers `(x0, ε)` from a noisy latent and a velocity at level `(α, β)`.
pub fn split_velocity(alpha: f64, beta: f64, x_t: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let x0 = mix(alpha, x_t, -beta, v)?;
    let eps = mix(beta, x_t, alpha, v)?;
    Ok((x0, eps))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Training-time step draw: uniform over `1..=T`, never the noiseless step.
pub fn sample_train_step(schedule: &NoiseSchedule, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=schedule.num_steps())
}
