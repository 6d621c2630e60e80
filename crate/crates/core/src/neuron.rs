//! Leaky integrate-and-fire dynamics with hard reset.
//!
//! One step computes the pre-reset potential `u_pre = tau * u + input`, fires
//! wherever `u_pre >= theta` (Heaviside at zero counts as firing) and resets
//! firing neurons to exactly zero. The pre-reset potential is kept in the
//! state because distillation reads it.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape4, SpikeTensor, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifConfig {
    /// Leak factor, `0 <= tau < 1`.
    pub tau: f64,
    /// Firing threshold.
    pub theta: f64,
    /// Half-width of the rectangular surrogate window.
    pub surrogate_width: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau: 0.25,
            theta: 1.0,
            surrogate_width: 0.5,
        }
    }
}

impl LifConfig {
    pub fn new(tau: f64, theta: f64, surrogate_width: f64) -> Result<Self> {
        let cfg = LifConfig {
            tau,
            theta,
            surrogate_width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must be in [0, 1), got {}",
                self.tau
            )));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if !(self.surrogate_width > 0.0) || !self.surrogate_width.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "surrogate_width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    /// Rectangular surrogate derivative of the spike function at `u_pre`.
    #[inline]
    pub fn surrogate(&self, u_pre: f64) -> f64 {
        if (u_pre - self.theta).abs() <= self.surrogate_width {
            1.0 / (2.0 * self.surrogate_width)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    /// Post-reset potential carried to the next step.
    pub u: Tensor4,
    /// Pre-reset potential of the most recent step.
    pub u_pre: Tensor4,
}

impl LifState {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        LifState {
            u: Tensor4::zeros(shape),
            u_pre: Tensor4::zeros(shape),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.u.shape()
    }
}

/// Advances every neuron by one timestep.
pub fn lif_step(
    state: &LifState,
    input: &Tensor4,
    cfg: &LifConfig,
) -> Result<(SpikeTensor, LifState)> {
    let shape = state.u.shape();
    if input.shape() != shape {
        return Err(shape_err(shape, input.shape()));
    }
    let mut spikes = SpikeTensor::zeros(shape);
    let mut u = Tensor4::zeros(shape);
    let mut u_pre = Tensor4::zeros(shape);
    for (n, ((&prev, &x), (pre, post))) in state
        .u
        .data()
        .iter()
        .zip(input.data())
        .zip(u_pre.data_mut().iter_mut().zip(u.data_mut().iter_mut()))
        .enumerate()
    {
        let v = cfg.tau * prev + x;
        *pre = v;
        if v - cfg.theta >= 0.0 {
            spikes.set_flat(n, true);
            *post = 0.0;
        } else {
            *post = v;
        }
    }
    Ok((spikes, LifState { u, u_pre }))
}

/// Elementwise surrogate gradient `1/(2a)` inside `|u_pre - theta| <= a`.
pub fn surrogate_grad(u_pre: &Tensor4, cfg: &LifConfig) -> Tensor4 {
    u_pre.map(|v| cfg.surrogate(v))
}
