//! Frozen SSL-encoder stand-in, smoothing views, stabilized discrepancy, and
//! the windowed slope estimator producing the regime variable g_k.
//!
//! The encoder is a fixed random two-layer tanh network. It never records
//! gradient nodes: monitoring is purely observational and nothing here flows
//! back into the training objective.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::VecDeque;

/// Frozen two-layer feature extractor. Identical seed, identical features,
/// forever.
#[derive(Debug, Clone)]
pub struct SslEncoder {
    /// [d_h, f]
    a1: Tensor,
    /// [d_ssl, d_h]
    a2: Tensor,
}

impl SslEncoder {
    pub fn new(seed: u64, f: usize, d_h: usize, d_ssl: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: [usize; 2], std: f64| {
            let n = shape[0] * shape[1];
            Tensor {
                shape: shape.to_vec(),
                data: (0..n)
                    .map(|_| {
                        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect(),
            }
        };
        let a1 = draw([d_h, f], 1.0 / (f as f64).sqrt());
        let a2 = draw([d_ssl, d_h], 1.0 / (d_h as f64).sqrt());
        SslEncoder { a1, a2 }
    }

    pub fn input_height(&self) -> usize {
        self.a1.shape[1]
    }

    pub fn d_ssl(&self) -> usize {
        self.a2.shape[0]
    }

    pub fn weight_frobenius_norms(&self) -> (f64, f64) {
        let fro = |t: &Tensor| t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        (fro(&self.a1), fro(&self.a2))
    }

    /// Per-frame features: feat[:, n] = tanh(A2 tanh(A1 x[:, n])).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[0] != self.input_height() {
            return Err(Error::shape(
                "encode",
                format!("input {:?}, encoder expects height {}", x.shape, self.input_height()),
            ));
        }
        let (f, n) = (x.shape[0], x.shape[1]);
        let d_h = self.a1.shape[0];
        let d_ssl = self.d_ssl();
        let mut out = Tensor::zeros(&[d_ssl, n]);
        let mut hidden = vec![0.0; d_h];
        for col in 0..n {
            for h in 0..d_h {
                let mut acc = 0.0;
                for r in 0..f {
                    acc += self.a1.data[h * f + r] * x.data[r * n + col];
                }
                hidden[h] = acc.tanh();
            }
            for o in 0..d_ssl {
                let mut acc = 0.0;
                for (h, hv) in hidden.iter().enumerate() {
                    acc += self.a2.data[o * d_h + h] * hv;
                }
                out.data[o * n + col] = acc.tanh();
            }
        }
        Ok(out)
    }
}

/// Block-mean downsample by `factor`, then bilinear upsample back to the
/// original grid.
fn down_up(x: &Tensor, factor: usize) -> Tensor {
    let (f, n) = (x.shape[0], x.shape[1]);
    let (cf, cn) = (f / factor, n / factor);
    let mut coarse = vec![0.0; cf * cn];
    let inv = 1.0 / (factor * factor) as f64;
    for i in 0..cf {
        for j in 0..cn {
            let mut acc = 0.0;
            for di in 0..factor {
                for dj in 0..factor {
                    acc += x.data[(i * factor + di) * n + j * factor + dj];
                }
            }
            coarse[i * cn + j] = acc * inv;
        }
    }
    // Bilinear interpolation on the coarse grid, edge-clamped.
    let mut out = Tensor::zeros(&[f, n]);
    let sample_axis = |pos: usize, len: usize| -> (usize, usize, f64) {
        let c = (pos as f64 + 0.5) / factor as f64 - 0.5;
        let c = c.clamp(0.0, (len - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, c - lo as f64)
    };
    for r in 0..f {
        let (r0, r1, wr) = sample_axis(r, cf);
        for c in 0..n {
            let (c0, c1, wc) = sample_axis(c, cn);
            let v = (1.0 - wr) * (1.0 - wc) * coarse[r0 * cn + c0]
                + (1.0 - wr) * wc * coarse[r0 * cn + c1]
                + wr * (1.0 - wc) * coarse[r1 * cn + c0]
                + wr * wc * coarse[r1 * cn + c1];
            out.data[r * n + c] = v;
        }
    }
    out
}

/// The fixed view set: identity, down-up by 2, down-up by 4.
pub fn smoothing_views(x: &Tensor) -> Result<Vec<Tensor>> {
    if x.shape.len() != 2 || x.shape[0] % 4 != 0 || x.shape[1] % 4 != 0 {
        return Err(Error::Contract(format!(
            "smoothing_views: dims {:?} must be 2-D and divisible by 4",
            x.shape
        )));
    }
    Ok(vec![x.clone(), down_up(x, 2), down_up(x, 4)])
}

/// Stabilized SSL-space discrepancy: mean over batch and views of the mean
/// squared feature difference, with denominator exactly |B| * |R|.
pub fn ssl_discrepancy(
    x0_hat_batch: &[Tensor],
    x0_batch: &[Tensor],
    enc: &SslEncoder,
) -> Result<f64> {
    if x0_hat_batch.is_empty() || x0_hat_batch.len() != x0_batch.len() {
        return Err(Error::Contract(format!(
            "ssl_discrepancy: batch sizes {} vs {}",
            x0_hat_batch.len(),
            x0_batch.len()
        )));
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for (xh, x0) in x0_hat_batch.iter().zip(x0_batch) {
        if xh.shape != x0.shape {
            return Err(Error::shape(
                "ssl_discrepancy",
                format!("{:?} vs {:?}", xh.shape, x0.shape),
            ));
        }
        let views_h = smoothing_views(xh)?;
        let views_0 = smoothing_views(x0)?;
        for (vh, v0) in views_h.iter().zip(&views_0) {
            let fh = enc.encode(vh)?;
            let f0 = enc.encode(v0)?;
            let n = fh.numel() as f64;
            let d: f64 = fh
                .data
                .iter()
                .zip(&f0.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
            total += d;
            terms += 1;
        }
    }
    Ok(total / terms as f64)
}

/// Closed-form ordinary least squares slope of y against x.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xbar = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let ybar = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - xbar) * (y - ybar);
        den += (x - xbar) * (x - xbar);
    }
    num / den
}

/// Ring buffer of (step, discrepancy) observations. Reports the regime
/// variable g_k = -(OLS slope) once filled to capacity.
#[derive(Debug, Clone)]
pub struct RegimeWindow {
    capacity: usize,
    entries: VecDeque<(u64, f64)>,
}

impl RegimeWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::Config(format!("regime window needs m >= 2, got {}", capacity)));
        }
        Ok(RegimeWindow { capacity, entries: VecDeque::new() })
    }

    pub fn is_ready(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append an observation; once the window is full, returns g_k.
    pub fn observe_and_slope(&mut self, k: u64, discrepancy: f64) -> Result<Option<f64>> {
        if let Some((last, _)) = self.entries.back() {
            if k <= *last {
                return Err(Error::Contract(format!(
                    "regime window: step {} not greater than last recorded {}",
                    k, last
                )));
            }
        }
        self.entries.push_back((k, discrepancy));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        if self.is_ready() {
            let pts: Vec<(f64, f64)> =
                self.entries.iter().map(|(k, l)| (*k as f64, *l)).collect();
            Ok(Some(-ols_slope(&pts)))
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn views_preserve_constants() {
        let x = Tensor { shape: vec![8, 8], data: vec![3.25; 64] };
        let views = smoothing_views(&x).unwrap();
        assert_eq!(views.len(), 3);
        for v in &views {
            for val in &v.data {
                assert!((val - 3.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkerboard_factor2_view_is_zero() {
        let mut x = Tensor::zeros(&[4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                x.data[r * 4 + c] = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let views = smoothing_views(&x).unwrap();
        for val in &views[1].data {
            assert!(val.abs() < 1e-12);
        }
    }

    #[test]
    fn views_reject_bad_dims() {
        let x = Tensor::zeros(&[6, 8]);
        assert!(smoothing_views(&x).is_err());
    }

    #[test]
    fn encode_zero_gives_zero() {
        let enc = SslEncoder::new(3, 8, 6, 4);
        let out = enc.encode(&Tensor::zeros(&[8, 5])).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_is_frozen_deterministic() {
        let enc = SslEncoder::new(9, 8, 6, 4);
        let enc2 = SslEncoder::new(9, 8, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor {
            shape: vec![8, 5],
            data: (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        let c = enc2.encode(&x).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data, c.data);
    }

    #[test]
    fn encode_lipschitz_bound() {
        let enc = SslEncoder::new(5, 8, 6, 4);
        let (n1, n2) = enc.weight_frobenius_norms();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = Tensor {
                shape: vec![8, 4],
                data: (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let y = Tensor {
                shape: vec![8, 4],
                data: (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let fx = enc.encode(&x).unwrap();
            let fy = enc.encode(&y).unwrap();
            let dist = |a: &Tensor, b: &Tensor| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            };
            assert!(dist(&fx, &fy) <= n1 * n2 * dist(&x, &y) + 1e-12);
        }
    }

    #[test]
    fn discrepancy_zero_for_identical_and_symmetric() {
        let enc = SslEncoder::new(4, 8, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| Tensor {
            shape: vec![8, 8],
            data: (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        assert_eq!(ssl_discrepancy(&[a.clone()], &[a.clone()], &enc).unwrap(), 0.0);
        let fwd = ssl_discrepancy(&[a.clone()], &[b.clone()], &enc).unwrap();
        let rev = ssl_discrepancy(&[b], &[a], &enc).unwrap();
        assert!((fwd - rev).abs() < 1e-15);
    }

    #[test]
    fn discrepancy_matches_double_loop_oracle() {
        let enc = SslEncoder::new(4, 8, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mk = |rng: &mut ChaCha8Rng| Tensor {
            shape: vec![8, 8],
            data: (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let hats: Vec<Tensor> = (0..2).map(|_| mk(&mut rng)).collect();
        let refs: Vec<Tensor> = (0..2).map(|_| mk(&mut rng)).collect();
        // Naive double loop over batch elements and views.
        let mut acc = 0.0;
        for i in 0..2 {
            let vh = smoothing_views(&hats[i]).unwrap();
            let v0 = smoothing_views(&refs[i]).unwrap();
            for r in 0..3 {
                let fh = enc.encode(&vh[r]).unwrap();
                let f0 = enc.encode(&v0[r]).unwrap();
                let mut d = 0.0;
                for j in 0..fh.numel() {
                    let e = fh.data[j] - f0.data[j];
                    d += e * e;
                }
                acc += d / fh.numel() as f64;
            }
        }
        let naive = acc / 6.0;
        let got = ssl_discrepancy(&hats, &refs, &enc).unwrap();
        assert!((got - naive).abs() < 1e-14);
    }

    #[test]
    fn discrepancy_batch_permutation_invariant() {
        let enc = SslEncoder::new(4, 8, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mk = |rng: &mut ChaCha8Rng| Tensor {
            shape: vec![8, 8],
            data: (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let hats: Vec<Tensor> = (0..3).map(|_| mk(&mut rng)).collect();
        let refs: Vec<Tensor> = (0..3).map(|_| mk(&mut rng)).collect();
        let a = ssl_discrepancy(&hats, &refs, &enc).unwrap();
        let hp = vec![hats[2].clone(), hats[0].clone(), hats[1].clone()];
        let rp = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
        let b = ssl_discrepancy(&hp, &rp, &enc).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let enc = SslEncoder::new(4, 8, 6, 4);
        assert!(ssl_discrepancy(&[], &[], &enc).is_err());
    }

    #[test]
    fn window_exact_linear_data() {
        let mut w = RegimeWindow::new(3).unwrap();
        assert!(w.observe_and_slope(0, 1.0).unwrap().is_none());
        assert!(w.observe_and_slope(500, 0.9).unwrap().is_none());
        let g = w.observe_and_slope(1000, 0.8).unwrap().unwrap();
        assert!((g - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn window_constant_gives_zero() {
        let mut w = RegimeWindow::new(3).unwrap();
        w.observe_and_slope(0, 0.5).unwrap();
        w.observe_and_slope(10, 0.5).unwrap();
        let g = w.observe_and_slope(20, 0.5).unwrap().unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn window_matches_closed_form_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut w = RegimeWindow::new(5).unwrap();
        let mut pts = Vec::new();
        for i in 0..5u64 {
            let y = 1.0 - 0.01 * i as f64 + rng.gen_range(-0.05..0.05);
            pts.push((i as f64 * 50.0, y));
            let res = w.observe_and_slope(i * 50, y).unwrap();
            if i == 4 {
                let g = res.unwrap();
                assert!((g + ols_slope(&pts)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sign_convention() {
        let mut dec = RegimeWindow::new(3).unwrap();
        dec.observe_and_slope(0, 3.0).unwrap();
        dec.observe_and_slope(1, 2.0).unwrap();
        assert!(dec.observe_and_slope(2, 1.0).unwrap().unwrap() > 0.0);

        let mut inc = RegimeWindow::new(3).unwrap();
        inc.observe_and_slope(0, 1.0).unwrap();
        inc.observe_and_slope(1, 2.0).unwrap();
        assert!(inc.observe_and_slope(2, 3.0).unwrap().unwrap() < 0.0);
    }

    #[test]
    fn non_monotone_step_rejected() {
        let mut w = RegimeWindow::new(3).unwrap();
        w.observe_and_slope(5, 1.0).unwrap();
        assert!(w.observe_and_slope(5, 1.0).is_err());
        assert!(w.observe_and_slope(4, 1.0).is_err());
    }

    #[test]
    fn eviction_keeps_most_recent() {
        let mut w = RegimeWindow::new(2).unwrap();
        w.observe_and_slope(0, 5.0).unwrap();
        w.observe_and_slope(1, 4.0).unwrap();
        // After eviction the slope covers (1,4),(2,3): slope -1, g = 1.
        let g = w.observe_and_slope(2, 3.0).unwrap().unwrap();
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monitoring_records_no_graph_nodes() {
        use crate::autodiff::Tape;
        let enc = SslEncoder::new(4, 8, 6, 4);
        let tape = Tape::new();
        let x = Tensor { shape: vec![8, 8], data: vec![0.5; 64] };
        let _ = ssl_discrepancy(&[x.clone()], &[x], &enc).unwrap();
        assert_eq!(tape.node_count(), 0);
    }
}
