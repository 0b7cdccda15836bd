//! Regime-driven timestep sampling.
//!
//! The regime variable g_k is mapped through an exponential transform to a
//! Beta-distribution mode in (0, 1); timesteps are drawn from that Beta with a
//! fixed concentration. Until the regime window is ready the sampler falls
//! back to an exactly uniform draw over timesteps.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Beta, Distribution};

/// mu = 1 / (1 + exp(g / s_scale)). Strictly decreasing in g; mu(0) = 0.5.
pub fn mode_from_progress(g: f64, s_scale: f64) -> Result<f64> {
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("regime variable g = {}", g)));
    }
    if !(s_scale > 0.0) {
        return Err(Error::Config(format!("s_scale must be positive, got {}", s_scale)));
    }
    let h = (g / s_scale).exp();
    Ok(1.0 / (1.0 + h))
}

/// Shape parameters with mode exactly mu and concentration alpha + beta = nu.
pub fn beta_shapes(mu: f64, nu: f64) -> Result<(f64, f64)> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Contract(format!("mode mu must be in (0, 1), got {}", mu)));
    }
    if !(nu > 2.0) {
        return Err(Error::Contract(format!(
            "concentration nu must exceed 2 for a defined mode, got {}",
            nu
        )));
    }
    let alpha = mu * (nu - 2.0) + 1.0;
    let beta = (1.0 - mu) * (nu - 2.0) + 1.0;
    Ok((alpha, beta))
}

/// Draw tau ~ Beta(alpha, beta) and discretize to t = min(T-1, floor(tau T)).
pub fn sample_timestep<R: Rng + ?Sized>(
    alpha: f64,
    beta: f64,
    t_steps: usize,
    rng: &mut R,
) -> Result<usize> {
    if t_steps == 0 {
        return Err(Error::Contract("sample_timestep: T must be >= 1".into()));
    }
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::Contract(format!("invalid Beta shapes ({}, {}): {}", alpha, beta, e)))?;
    let tau: f64 = dist.sample(rng);
    Ok(((tau * t_steps as f64).floor() as usize).min(t_steps - 1))
}

/// Current sampling state. `mu` tracks the regime; `s_scale = 0` in the config
/// means self-normalizing: it is pinned to |g| on the first observation
/// (floored at 1e-8).
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub mu: f64,
    pub nu: f64,
    pub s_scale: Option<f64>,
    pub ready: bool,
}

impl SamplerState {
    pub fn new(nu: f64, s_scale: Option<f64>) -> Result<Self> {
        if !(nu > 2.0) {
            return Err(Error::Config(format!("nu must exceed 2, got {}", nu)));
        }
        if let Some(s) = s_scale {
            if !(s > 0.0) {
                return Err(Error::Config(format!("s_scale must be positive, got {}", s)));
            }
        }
        Ok(SamplerState { mu: 0.5, nu, s_scale, ready: false })
    }

    /// Update the mode from a fresh regime observation.
    pub fn update(&mut self, g: f64) -> Result<()> {
        let s = match self.s_scale {
            Some(s) => s,
            None => {
                let s = g.abs().max(1e-8);
                self.s_scale = Some(s);
                s
            }
        };
        // The logistic saturates to exactly 0 or 1 once |g / s| is large;
        // keep the mode strictly interior so the Beta shapes stay defined.
        self.mu = mode_from_progress(g, s)?.clamp(1e-9, 1.0 - 1e-9);
        self.ready = true;
        Ok(())
    }

    /// Draw a training timestep: Beta-distributed once ready, exactly uniform
    /// before that.
    pub fn draw<R: Rng + ?Sized>(&self, t_steps: usize, rng: &mut R) -> Result<usize> {
        if !self.ready {
            return Ok(rng.gen_range(0..t_steps));
        }
        let (alpha, beta) = beta_shapes(self.mu, self.nu)?;
        sample_timestep(alpha, beta, t_steps, rng)
    }

    pub fn shapes(&self) -> Result<(f64, f64)> {
        beta_shapes(self.mu, self.nu)
    }
}
