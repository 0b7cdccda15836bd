//! Forward noising process, epsilon parameterization, and the base objective.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-timestep coefficients of the forward diffusion process (linear beta
/// schedule, variance preserving).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {}", t_steps)));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs 0 < beta_min <= beta_max < 1, got [{}, {}]",
            beta_min, beta_max
        )));
    }
    let mut beta = Vec::with_capacity(t_steps);
    let mut alpha = Vec::with_capacity(t_steps);
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for t in 0..t_steps {
        let b = beta_min + (beta_max - beta_min) * t as f64 / (t_steps - 1) as f64;
        beta.push(b);
        alpha.push(1.0 - b);
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { t_steps, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_steps {
            return Err(Error::Contract(format!("timestep {} out of range [0, {})", t, self.t_steps)));
        }
        Ok(())
    }
}

/// z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if z0.shape != eps.shape {
        return Err(Error::shape("forward_noise", format!("{:?} vs {:?}", z0.shape, eps.shape)));
    }
    let ab = s.alpha_bar[t];
    let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data.iter().zip(&eps.data).map(|(z, e)| c0 * z + ce * e).collect();
    Ok(Tensor { shape: z0.shape.clone(), data })
}

/// x0_hat = (z_t - sqrt(1 - alpha_bar[t]) eps_hat) / sqrt(alpha_bar[t])
pub fn x0_from_eps(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    if z_t.shape != eps_hat.shape {
        return Err(Error::shape("x0_from_eps", format!("{:?} vs {:?}", z_t.shape, eps_hat.shape)));
    }
    let ab = s.alpha_bar[t];
    if ab < 1e-8 {
        return Err(Error::Contract(format!(
            "x0_from_eps: alpha_bar[{}] = {:e} is singular",
            t, ab
        )));
    }
    let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(z, e)| (z - ce * e) / c0)
        .collect();
    Ok(Tensor { shape: z_t.shape.clone(), data })
}

/// Mean squared difference over all entries.
pub fn diffusion_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    if eps_hat.shape != eps.shape {
        return Err(Error::shape("diffusion_loss", format!("{:?} vs {:?}", eps_hat.shape, eps.shape)));
    }
    let n = eps.numel() as f64;
    Ok(eps_hat
        .data
        .iter()
        .zip(&eps.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
