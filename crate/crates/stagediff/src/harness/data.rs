//! Synthetic spectrogram-like datasets.
//!
//! Each class is a harmonic template: a stack of Gaussian row bands at integer
//! multiples of a base row, each with its own slow temporal amplitude
//! modulation. Samples are the class template plus i.i.d. noise, normalized to
//! zero mean and unit variance.

use super::config::Task;
use crate::autodiff::Tensor;
use crate::denoiser::Condition;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Sample {
    /// [f, n] row-major grid, normalized per sample.
    pub x: Tensor,
    pub cond: Condition,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub f: usize,
    pub n: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Row-major flattening of sample i, length f * n.
    pub fn x_flat(&self, i: usize) -> Tensor {
        Tensor::vector(self.samples[i].x.data.clone())
    }
}

struct Harmonic {
    center: f64,
    width: f64,
    amp: f64,
    mod_freq: f64,
    mod_phase: f64,
}

fn class_template(rng: &mut ChaCha8Rng, f: usize, n: usize) -> Tensor {
    // Base row in the lower quarter of the grid so harmonics climb upward
    // and the bottom half stays informative.
    let f0 = rng.gen_range(1.2..(f as f64 / 4.0).max(2.0));
    let n_harm = rng.gen_range(2..=4usize);
    let harmonics: Vec<Harmonic> = (1..=n_harm)
        .map(|h| Harmonic {
            center: f0 * h as f64,
            width: rng.gen_range(0.6..1.2),
            amp: rng.gen_range(0.6..1.0) / h as f64,
            mod_freq: rng.gen_range(0.5..3.0),
            mod_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let mut t = Tensor::zeros(&[f, n]);
    for r in 0..f {
        for c in 0..n {
            let mut v = 0.0;
            for h in &harmonics {
                if h.center > f as f64 - 1.0 {
                    continue;
                }
                let band = (-((r as f64 - h.center).powi(2)) / (2.0 * h.width * h.width)).exp();
                let envelope = 1.0
                    + 0.4
                        * (std::f64::consts::TAU * h.mod_freq * c as f64 / n as f64 + h.mod_phase)
                            .sin();
                v += h.amp * band * envelope;
            }
            t.data[r * n + c] = v;
        }
    }
    t
}

fn normalize(x: &mut Tensor) {
    let n = x.numel() as f64;
    let mean = x.data.iter().sum::<f64>() / n;
    let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for v in &mut x.data {
        *v = (*v - mean) / std;
    }
}

/// Deterministic dataset: same (task, seed, split, count, dims) gives
/// bit-identical samples. The class templates depend only on `seed`, while
/// per-sample noise also depends on `split`, so train, monitor, and eval sets
/// share one task distribution but never share samples. Classes are assigned
/// round-robin so every class is populated.
pub fn gen_dataset(
    task: Task,
    seed: u64,
    split: u64,
    count: usize,
    f: usize,
    n: usize,
    n_classes: usize,
) -> Result<Dataset> {
    if count == 0 || n_classes == 0 {
        return Err(Error::Config("gen_dataset: count and n_classes must be positive".into()));
    }
    if f < 4 || n < 4 {
        return Err(Error::Config(format!("gen_dataset: grid {}x{} too small", f, n)));
    }
    let mut template_rng = ChaCha8Rng::seed_from_u64(super::derive_seed(seed, 0x7431));
    let templates: Vec<Tensor> =
        (0..n_classes).map(|_| class_template(&mut template_rng, f, n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(seed, 0x7a00 ^ split));
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % n_classes;
        let mut x = templates[class].clone();
        for v in &mut x.data {
            *v += 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        normalize(&mut x);
        let cond = match task {
            Task::ClassCond => Condition::ClassLabel(class),
            Task::SuperRes => {
                // Low-band copy: keep the bottom f/2 rows, zero the rest.
                let mut low = x.data.clone();
                for v in low.iter_mut().skip(f / 2 * n) {
                    *v = 0.0;
                }
                Condition::LowBand(Tensor::vector(low))
            }
        };
        samples.push(Sample { x, cond, class });
    }
    Ok(Dataset { samples, f, n })
}
