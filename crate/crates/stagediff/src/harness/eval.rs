//! Held-out evaluation: validation diffusion loss, SSL-space discrepancy, and
//! for the bandwidth-extension task log-spectral distances computed on full
//! ancestral samples.

use super::config::{Task, TrainConfig};
use super::data::gen_dataset;
use super::train::monitor_discrepancy;
use super::{derive_seed, streams};
use crate::autodiff::Tensor;
use crate::denoiser::{denoise, Condition, DenoiserParams};
use crate::diffusion::{diffusion_loss, forward_noise, make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ssl::SslEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct LsdMetrics {
    pub full: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub diff_loss: f64,
    pub ssl_disc: f64,
    /// Present only for the bandwidth-extension task when sampling was run.
    pub lsd: Option<LsdMetrics>,
}

/// One reverse ancestral step: posterior mean in the epsilon parameterization
/// plus (for t > 0) noise at the posterior variance
/// beta_tilde = (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t].
pub fn reverse_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t >= s.t_steps {
        return Err(Error::Contract(format!("reverse_step: t {} out of range", t)));
    }
    let ab = s.alpha_bar[t];
    let coef = s.beta[t] / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / s.alpha[t].sqrt();
    let mut data: Vec<f64> = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(z, e)| inv_sqrt_a * (z - coef * e))
        .collect();
    if t > 0 {
        let beta_tilde = (1.0 - s.alpha_bar[t - 1]) / (1.0 - ab) * s.beta[t];
        let sd = beta_tilde.sqrt();
        let noise = noise.ok_or_else(|| Error::Contract("reverse_step: noise required for t > 0".into()))?;
        for (d, n) in data.iter_mut().zip(&noise.data) {
            *d += sd * n;
        }
    }
    Ok(Tensor { shape: z_t.shape.clone(), data })
}

/// Full reverse chain from pure noise under the given conditioning.
pub fn ancestral_sample(
    params: &DenoiserParams,
    cond: &Condition,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d_in = params.d_in;
    let draw = |rng: &mut ChaCha8Rng| {
        Tensor::vector(
            (0..d_in)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect(),
        )
    };
    let mut z = draw(rng);
    for t in (0..s.t_steps).rev() {
        let eps_hat = denoise(params, &z, t, s.t_steps, cond, None)?;
        let noise = if t > 0 { Some(draw(rng)) } else { None };
        z = reverse_step(&z, &eps_hat, t, s, noise.as_ref())?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("ancestral sample at t = {}", t)));
        }
    }
    Ok(z)
}

/// Log-spectral distance over the given row band: per-frame root mean squared
/// difference of log10 power, averaged over frames.
pub fn lsd(x: &Tensor, x_hat: &Tensor, rows: std::ops::Range<usize>) -> Result<f64> {
    if x.shape != x_hat.shape || x.shape.len() != 2 {
        return Err(Error::shape("lsd", format!("{:?} vs {:?}", x.shape, x_hat.shape)));
    }
    let (f, n) = (x.shape[0], x.shape[1]);
    if rows.end > f || rows.is_empty() {
        return Err(Error::Contract(format!("lsd: row band {:?} invalid for {} rows", rows, f)));
    }
    let eps = 1e-8;
    let band = rows.len() as f64;
    let mut acc = 0.0;
    for c in 0..n {
        let mut frame = 0.0;
        for r in rows.clone() {
            let a = (x.data[r * n + c].powi(2) + eps).log10();
            let b = (x_hat.data[r * n + c].powi(2) + eps).log10();
            frame += (a - b) * (a - b);
        }
        acc += (frame / band).sqrt();
    }
    Ok(acc / n as f64)
}

/// Evaluate a model on a freshly generated held-out set. `with_sampling` runs
/// the reverse chain for LSD metrics (bandwidth-extension task only).
pub fn evaluate(params: &DenoiserParams, cfg: &TrainConfig, with_sampling: bool) -> Result<Metrics> {
    if params.d_in != cfg.d_in() {
        return Err(Error::Config(format!(
            "model d_in {} disagrees with config grid {}x{}",
            params.d_in, cfg.f, cfg.n
        )));
    }
    let schedule = make_schedule(cfg.t_steps, cfg.beta_min, cfg.beta_max)?;
    let eval_set = gen_dataset(
        cfg.task,
        derive_seed(cfg.seed, streams::TRAIN_DATA),
        super::splits::EVAL,
        cfg.n_eval,
        cfg.f,
        cfg.n,
        cfg.n_classes,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::EVAL_DRAWS));

    let mut diff_acc = 0.0;
    for s in &eval_set.samples {
        let t = rng.gen_range(0..cfg.t_steps);
        let eps = Tensor::vector(
            (0..cfg.d_in())
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        );
        let x0 = Tensor::vector(s.x.data.clone());
        let z_t = forward_noise(&x0, t, &eps, &schedule)?;
        let eps_hat = denoise(params, &z_t, t, cfg.t_steps, &s.cond, None)?;
        diff_acc += diffusion_loss(&eps_hat, &eps)?;
    }
    let diff_loss = diff_acc / eval_set.len() as f64;

    let enc = SslEncoder::new(derive_seed(cfg.seed, streams::ENCODER), cfg.f, cfg.d_h, cfg.d_ssl);
    let ssl_disc = monitor_discrepancy(
        params,
        &eval_set,
        &enc,
        &schedule,
        derive_seed(cfg.seed, streams::EVAL_DRAWS),
    )?;

    let lsd_metrics = if with_sampling && cfg.task == Task::SuperRes {
        let half = cfg.f / 2;
        let (mut full, mut low, mut high) = (0.0, 0.0, 0.0);
        for s in &eval_set.samples {
            let flat = ancestral_sample(params, &s.cond, &schedule, &mut rng)?;
            let x_hat = Tensor { shape: vec![cfg.f, cfg.n], data: flat.data };
            full += lsd(&s.x, &x_hat, 0..cfg.f)?;
            low += lsd(&s.x, &x_hat, 0..half)?;
            high += lsd(&s.x, &x_hat, half..cfg.f)?;
        }
        let n = eval_set.len() as f64;
        Some(LsdMetrics { full: full / n, low: low / n, high: high / n })
    } else {
        None
    };

    Ok(Metrics { diff_loss, ssl_disc, lsd: lsd_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;

    #[test]
    fn lsd_zero_for_identical_and_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor {
            shape: vec![8, 8],
            data: (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        assert_eq!(lsd(&x, &x, 0..8).unwrap(), 0.0);
        // Power spectra ignore sign.
        let neg = Tensor {
            shape: vec![8, 8],
            data: x.data.iter().map(|v| -v).collect(),
        };
        assert!(lsd(&x, &neg, 0..8).unwrap() < 1e-12);
    }

    #[test]
    fn lsd_hand_value() {
        // Constant grids a and b: per-bin difference is log10(a^2) - log10(b^2),
        // so LSD is its absolute value (eps is negligible at these magnitudes).
        let a = Tensor { shape: vec![4, 4], data: vec![1.0; 16] };
        let b = Tensor { shape: vec![4, 4], data: vec![10.0; 16] };
        let got = lsd(&a, &b, 0..4).unwrap();
        assert!((got - 2.0).abs() < 1e-6, "{}", got);
    }

    #[test]
    fn lsd_band_split() {
        // Grids differ only in the top half: low-band LSD is zero, high is not.
        let mut x = Tensor { shape: vec![8, 4], data: vec![1.0; 32] };
        let y = x.clone();
        for r in 4..8 {
            for c in 0..4 {
                x.data[r * 4 + c] = 3.0;
            }
        }
        assert_eq!(lsd(&x, &y, 0..4).unwrap(), 0.0);
        assert!(lsd(&x, &y, 4..8).unwrap() > 0.1);
    }

    #[test]
    fn lsd_rejects_bad_band() {
        let x = Tensor::zeros(&[4, 4]);
        assert!(lsd(&x, &x, 0..5).is_err());
        assert!(lsd(&x, &x, 2..2).is_err());
    }

    #[test]
    fn reverse_step_posterior_mean() {
        let s = make_schedule(10, 0.01, 0.1).unwrap();
        let z = Tensor::vector(vec![1.0, -2.0]);
        let e = Tensor::vector(vec![0.5, 0.25]);
        let out = reverse_step(&z, &e, 0, &s, None).unwrap();
        let coef = s.beta[0] / (1.0 - s.alpha_bar[0]).sqrt();
        let expect0 = (1.0 - coef * 0.5) / s.alpha[0].sqrt();
        assert!((out.data[0] - expect0).abs() < 1e-14);
        // t > 0 without noise is a contract violation.
        assert!(reverse_step(&z, &e, 3, &s, None).is_err());
    }

    #[test]
    fn reverse_step_noise_scaling() {
        let s = make_schedule(10, 0.01, 0.1).unwrap();
        let z = Tensor::vector(vec![0.0]);
        let e = Tensor::vector(vec![0.0]);
        let n = Tensor::vector(vec![1.0]);
        let t = 5;
        let out = reverse_step(&z, &e, t, &s, Some(&n)).unwrap();
        let beta_tilde = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
        assert!((out.data[0] - beta_tilde.sqrt()).abs() < 1e-14);
        assert!(beta_tilde < s.beta[t]);
    }

    #[test]
    fn ancestral_sample_shape_and_determinism() {
        let p = init_params(5, 8, 64, 2, 4, 6).unwrap();
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let cond = Condition::ClassLabel(1);
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = ancestral_sample(&p, &cond, &s, &mut r1).unwrap();
        let b = ancestral_sample(&p, &cond, &s, &mut r2).unwrap();
        assert_eq!(a.numel(), 64);
        assert_eq!(a.data, b.data);
        assert!(a.is_finite());
    }

    #[test]
    fn evaluate_smoke_and_determinism() {
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("f", "8"),
            ("n", "8"),
            ("d", "8"),
            ("l_b", "2"),
            ("n_classes", "4"),
            ("d_ssl", "6"),
            ("d_h", "8"),
            ("t_steps", "10"),
            ("n_eval", "4"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let p = init_params(9, cfg.d, cfg.d_in(), cfg.l_b, cfg.n_classes, cfg.d_ssl).unwrap();
        let a = evaluate(&p, &cfg, false).unwrap();
        let b = evaluate(&p, &cfg, false).unwrap();
        assert_eq!(a.diff_loss.to_bits(), b.diff_loss.to_bits());
        assert!(a.diff_loss.is_finite() && a.ssl_disc.is_finite());
        assert!(a.lsd.is_none());

        cfg.set("task", "super_res").unwrap();
        let m = evaluate(&p, &cfg, true).unwrap();
        let l = m.lsd.unwrap();
        assert!(l.full.is_finite() && l.low.is_finite() && l.high.is_finite());
    }

    #[test]
    fn evaluate_rejects_dim_mismatch() {
        let cfg = TrainConfig::default();
        let p = init_params(1, 8, 64, 2, 4, 6).unwrap();
        assert!(evaluate(&p, &cfg, false).is_err());
    }
}
