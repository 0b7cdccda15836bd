//! Decayed SSL guidance: the gamma decay schedule, reproducible
//! time-frequency mask generation, and masked-context construction.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Linear decay of the guidance active ratio down to zero at
/// rho_ssl * k_tot steps.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceSchedule {
    pub rho_ssl: f64,
    pub k_tot: u64,
}

impl GuidanceSchedule {
    pub fn new(rho_ssl: f64, k_tot: u64) -> Result<Self> {
        if !(rho_ssl > 0.0 && rho_ssl <= 1.0) {
            return Err(Error::Config(format!("rho_ssl must be in (0, 1], got {}", rho_ssl)));
        }
        if k_tot == 0 {
            return Err(Error::Config("k_tot must be positive".into()));
        }
        Ok(GuidanceSchedule { rho_ssl, k_tot })
    }

    /// gamma_k = max(0, 1 - k / (rho_ssl * k_tot))
    pub fn gamma(&self, k: u64) -> f64 {
        (1.0 - k as f64 / (self.rho_ssl * self.k_tot as f64)).max(0.0)
    }
}

/// Axis-factorized binary mask: independent per-row and per-column keep bits
/// each with probability sqrt(gamma), so the expected active fraction is
/// exactly gamma. The generator is keyed by (master_seed, k), making masks
/// reproducible without storing them.
pub fn make_mask(rows: usize, cols: usize, gamma: f64, master_seed: u64, k: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Contract(format!("mask gamma must be in [0, 1], got {}", gamma)));
    }
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&k.to_le_bytes());
    seed[16] = 0x6d; // domain tag: mask stream
    let mut rng = ChaCha8Rng::from_seed(seed);
    let p = gamma.sqrt();
    let row_keep: Vec<bool> = (0..rows).map(|_| rng.gen::<f64>() < p).collect();
    let col_keep: Vec<bool> = (0..cols).map(|_| rng.gen::<f64>() < p).collect();
    let mut m = Tensor::zeros(&[rows, cols]);
    for (r, rk) in row_keep.iter().enumerate() {
        if *rk {
            for (c, ck) in col_keep.iter().enumerate() {
                if *ck {
                    m.data[r * cols + c] = 1.0;
                }
            }
        }
    }
    Ok(m)
}

/// C_tilde = C_ssl elementwise masked.
pub fn apply_guidance(c_ssl: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if c_ssl.shape != mask.shape {
        return Err(Error::shape(
            "apply_guidance",
            format!("{:?} vs {:?}", c_ssl.shape, mask.shape),
        ));
    }
    let data = c_ssl.data.iter().zip(&mask.data).map(|(c, m)| c * m).collect();
    Ok(Tensor { shape: c_ssl.shape.clone(), data })
}
