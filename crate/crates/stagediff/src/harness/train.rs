//! The stage-aware training loop.
//!
//! Every mechanism draws from its own seeded random stream, so toggling
//! guidance, adaptive timestep sampling, or structure regularization never
//! shifts the draws of anything else. That is what makes disabled-mechanism
//! runs bit-identical to a plain diffusion loop.

use super::config::TrainConfig;
use super::data::{gen_dataset, Dataset};
use super::{derive_seed, splits, streams};
use crate::autodiff::{Tape, Tensor};
use crate::denoiser::{
    denoise_batch, init_params, make_cond_batch, register_params, Condition, DenoiserParams,
};
use crate::diffusion::{make_schedule, x0_from_eps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{make_mask, GuidanceSchedule};
use crate::sampler::SamplerState;
use crate::ssl::{ssl_discrepancy, RegimeWindow, SslEncoder};
use crate::structure::{
    beta_sp, block_stack, build_affinity, similarity_matrix, sp_loss_and_grad, AffinityOperator,
    SimilarityMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainRow {
    pub step: u64,
    pub diff_loss: f64,
    pub gamma: f64,
    pub beta_sp: f64,
    pub sp_loss: f64,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct MonitorRow {
    pub step: u64,
    pub ssl_loss: f64,
    pub g: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SamplerRow {
    pub step: u64,
    pub g: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub train: Vec<TrainRow>,
    pub monitor: Vec<MonitorRow>,
    pub sampler: Vec<SamplerRow>,
}

pub struct TrainOutcome {
    pub log: RunLog,
    pub params: DenoiserParams,
}

fn gaussian_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor {
        shape: vec![rows, cols],
        data: (0..rows * cols)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
    }
}

/// Forward the whole set at one timestep without gradients, returning
/// per-sample x0 reconstructions reshaped to the [f, n] grid.
fn reconstruct_at(
    params: &DenoiserParams,
    ds: &Dataset,
    t: usize,
    t_steps: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    let b = ds.len();
    let d_in = ds.f * ds.n;
    let mut z_data = vec![0.0; b * d_in];
    let (c0, ce) = (schedule.alpha_bar[t].sqrt(), (1.0 - schedule.alpha_bar[t]).sqrt());
    for i in 0..b {
        for j in 0..d_in {
            z_data[i * d_in + j] = c0 * ds.samples[i].x.data[j] + ce * eps.data[i * d_in + j];
        }
    }
    let conds: Vec<Condition> = ds.samples.iter().map(|s| s.cond.clone()).collect();
    let cb = make_cond_batch(&conds, params)?;
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params, false);
    let z = tape.constant(Tensor::matrix(b, d_in, z_data.clone())?);
    let out = denoise_batch(&mut tape, &ids, params, z, t, t_steps, &cb, None)?;
    let eps_hat = tape.value(out);
    let mut recon = Vec::with_capacity(b);
    for i in 0..b {
        let z_i = Tensor::vector(z_data[i * d_in..(i + 1) * d_in].to_vec());
        let e_i = Tensor::vector(eps_hat.data[i * d_in..(i + 1) * d_in].to_vec());
        let x0 = x0_from_eps(&z_i, &e_i, t, schedule)?;
        recon.push(Tensor { shape: vec![ds.f, ds.n], data: x0.data });
    }
    Ok(recon)
}

/// Stabilized SSL discrepancy of the model on a held-out set, averaged over
/// three fixed timesteps (T/4, T/2, 3T/4) with noise keyed by `noise_seed`.
/// The noise is regenerated from the seed each call, so repeated monitoring
/// sees the same corruption and the series is comparable across steps.
pub fn monitor_discrepancy(
    params: &DenoiserParams,
    ds: &Dataset,
    enc: &SslEncoder,
    schedule: &NoiseSchedule,
    noise_seed: u64,
) -> Result<f64> {
    let t_steps = schedule.t_steps;
    let ts = [t_steps / 4, t_steps / 2, 3 * t_steps / 4];
    let x0s: Vec<Tensor> = ds.samples.iter().map(|s| s.x.clone()).collect();
    let mut total = 0.0;
    for (i, &t) in ts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, i as u64));
        let eps = gaussian_batch(&mut rng, ds.len(), ds.f * ds.n);
        let recon = reconstruct_at(params, ds, t, t_steps, &eps, schedule)?;
        total += ssl_discrepancy(&recon, &x0s, enc)?;
    }
    Ok(total / ts.len() as f64)
}

struct CsvSinks {
    train: std::io::BufWriter<std::fs::File>,
    monitor: std::io::BufWriter<std::fs::File>,
    sampler: std::io::BufWriter<std::fs::File>,
}

impl CsvSinks {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            writeln!(w, "{}", header)?;
            Ok(w)
        };
        Ok(CsvSinks {
            train: open("train.csv", "step,diff_loss,gamma,beta_sp,sp_loss,t")?,
            monitor: open("monitor.csv", "step,ssl_loss,g,mu")?,
            sampler: open("sampler.csv", "step,g,mu,alpha,beta")?,
        })
    }
}

fn opt_col(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Run the full training loop. With `outdir` set, the run also streams
/// train/monitor/sampler CSV logs, periodic similarity snapshots, and
/// checkpoints into that directory.
pub fn train(cfg: &TrainConfig, outdir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d_in = cfg.d_in();
    let schedule = make_schedule(cfg.t_steps, cfg.beta_min, cfg.beta_max)?;
    let mut params = init_params(
        derive_seed(cfg.seed, streams::PARAMS),
        cfg.d,
        d_in,
        cfg.l_b,
        cfg.n_classes,
        cfg.d_ssl,
    )?;
    let data_seed = derive_seed(cfg.seed, streams::TRAIN_DATA);
    let train_set =
        gen_dataset(cfg.task, data_seed, splits::TRAIN, cfg.n_train, cfg.f, cfg.n, cfg.n_classes)?;
    let monitor_set = gen_dataset(
        cfg.task,
        data_seed,
        splits::MONITOR,
        cfg.monitor_size,
        cfg.f,
        cfg.n,
        cfg.n_classes,
    )?;
    let enc = SslEncoder::new(derive_seed(cfg.seed, streams::ENCODER), cfg.f, cfg.d_h, cfg.d_ssl);

    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::BATCH));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::NOISE));
    let mut tstep_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::TIMESTEP));
    let monitor_noise_seed = derive_seed(cfg.seed, streams::MONITOR_NOISE);

    let guidance = if cfg.guidance_enabled {
        Some(GuidanceSchedule::new(cfg.rho_ssl, cfg.k_tot)?)
    } else {
        None
    };
    // Frozen-encoder features of the fixed training set never change, so they
    // are computed once and masked per step.
    let ssl_feats: Option<Vec<Tensor>> = if cfg.guidance_enabled {
        Some(
            train_set
                .samples
                .iter()
                .map(|s| enc.encode(&s.x))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let affinity: Option<AffinityOperator> = match (&cfg.s_ref_path, cfg.structure_reg_enabled) {
        (Some(path), true) => {
            let s_ref = SimilarityMatrix::read_csv(Path::new(path))?;
            if s_ref.l_b != cfg.l_b {
                return Err(Error::Config(format!(
                    "reference pattern has {} blocks, model has {}",
                    s_ref.l_b, cfg.l_b
                )));
            }
            Some(build_affinity(&s_ref, cfg.affinity_norm)?)
        }
        _ => None,
    };
    let k_on = (cfg.k_on_frac * cfg.k_tot as f64).floor() as u64;
    let k_sp_off = (cfg.rho_sp * cfg.k_tot as f64).floor() as u64;

    let mut window = RegimeWindow::new(cfg.m)?;
    let mut sampler = SamplerState::new(cfg.nu, if cfg.s_scale > 0.0 { Some(cfg.s_scale) } else { None })?;
    let mut s_phi: Option<f64> = if cfg.s_phi > 0.0 { Some(cfg.s_phi) } else { None };
    let mut beta_sp_now: Option<f64> = None;

    let mut sinks = match outdir {
        Some(dir) => Some(CsvSinks::create(dir)?),
        None => None,
    };
    let mut log = RunLog::default();

    for k in 0..cfg.k_tot {
        // Monitoring pass: observe the discrepancy, refresh the regime
        // variable and everything derived from it.
        if k > 0 && k % cfg.delta_k == 0 {
            let ssl_loss = monitor_discrepancy(&params, &monitor_set, &enc, &schedule, monitor_noise_seed)?;
            let g = window.observe_and_slope(k, ssl_loss)?;
            if let Some(g) = g {
                sampler.update(g)?;
                let phi = *s_phi.get_or_insert_with(|| g.abs().max(1e-8));
                beta_sp_now = Some(beta_sp(g, phi)?);
                let (alpha, beta) = sampler.shapes()?;
                let row = SamplerRow { step: k, g, mu: sampler.mu, alpha, beta };
                if let Some(s) = sinks.as_mut() {
                    writeln!(s.sampler, "{},{},{},{},{}", row.step, row.g, row.mu, row.alpha, row.beta)?;
                }
                log.sampler.push(row);
            }
            let row = MonitorRow {
                step: k,
                ssl_loss,
                g,
                mu: if sampler.ready { Some(sampler.mu) } else { None },
            };
            if let Some(s) = sinks.as_mut() {
                writeln!(
                    s.monitor,
                    "{},{},{},{}",
                    row.step,
                    row.ssl_loss,
                    opt_col(row.g),
                    opt_col(row.mu)
                )?;
            }
            log.monitor.push(row);
        }

        // Draw the step's batch, timestep, and noise from their own streams.
        let idx: Vec<usize> = (0..cfg.batch).map(|_| batch_rng.gen_range(0..train_set.len())).collect();
        let t = if cfg.adaptive_t_enabled {
            sampler.draw(cfg.t_steps, &mut tstep_rng)?
        } else {
            tstep_rng.gen_range(0..cfg.t_steps)
        };
        let eps = gaussian_batch(&mut noise_rng, cfg.batch, d_in);
        let (c0, ce) = (schedule.alpha_bar[t].sqrt(), (1.0 - schedule.alpha_bar[t]).sqrt());
        let mut z_data = vec![0.0; cfg.batch * d_in];
        for (bi, &i) in idx.iter().enumerate() {
            for j in 0..d_in {
                z_data[bi * d_in + j] =
                    c0 * train_set.samples[i].x.data[j] + ce * eps.data[bi * d_in + j];
            }
        }

        // Decayed, masked SSL context. At gamma = 0 no context node enters the
        // graph at all.
        let gamma = guidance.map(|gs| gs.gamma(k)).unwrap_or(0.0);
        let pooled = if gamma > 0.0 {
            let feats = ssl_feats.as_ref().unwrap();
            let mask = make_mask(cfg.d_ssl, cfg.n, gamma, cfg.seed, k)?;
            let mut data = vec![0.0; cfg.batch * cfg.d_ssl];
            for (bi, &i) in idx.iter().enumerate() {
                let f = &feats[i];
                for r in 0..cfg.d_ssl {
                    let mut acc = 0.0;
                    for c in 0..cfg.n {
                        acc += mask.data[r * cfg.n + c] * f.data[r * cfg.n + c];
                    }
                    data[bi * cfg.d_ssl + r] = acc / cfg.n as f64;
                }
            }
            Some(Tensor::matrix(cfg.batch, cfg.d_ssl, data)?)
        } else {
            None
        };

        let conds: Vec<Condition> = idx.iter().map(|&i| train_set.samples[i].cond.clone()).collect();
        let cb = make_cond_batch(&conds, &params)?;

        let mut tape = Tape::new();
        let ids = register_params(&mut tape, &params, true);
        let z = tape.constant(Tensor::matrix(cfg.batch, d_in, z_data)?);
        let ctx = pooled.map(|p| tape.constant(p));
        let out = denoise_batch(&mut tape, &ids, &params, z, t, cfg.t_steps, &cb, ctx)?;
        let target = tape.constant(eps);
        let diff = tape.sub(out, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        let diff_loss = tape.value(loss).data[0];
        if !diff_loss.is_finite() {
            return Err(Error::Diverged { step: k });
        }
        tape.backward(loss)?;
        let mut grads = ids.grads(&tape);

        // Structure regularizer: analytic gradient added to the square block
        // weights while the gate is open.
        let sp_active = affinity.is_some() && beta_sp_now.is_some() && k >= k_on && k <= k_sp_off;
        let (beta_sp_eff, sp_loss) = if sp_active {
            let aff = affinity.as_ref().unwrap();
            let bsp = beta_sp_now.unwrap();
            let omega = block_stack(&params);
            let (sp_l, sp_g) = sp_loss_and_grad(&omega, aff)?;
            let coeff = cfg.lambda * bsp;
            let d2 = cfg.d * cfg.d;
            for (i, _) in params.blocks.iter().enumerate() {
                // grads layout: proj_in, proj_out, then per block w,v,bias,scale.
                let gw = &mut grads[2 + 4 * i];
                for r in 0..d2 {
                    gw.data[r] += coeff * sp_g.data[r * cfg.l_b + i];
                }
                let gv = &mut grads[3 + 4 * i];
                for r in 0..d2 {
                    gv.data[r] += coeff * sp_g.data[(d2 + r) * cfg.l_b + i];
                }
            }
            (bsp, sp_l)
        } else {
            (0.0, 0.0)
        };

        for (p, g) in params.tensors_mut().into_iter().zip(&grads) {
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= cfg.lr * gv;
            }
        }

        let row = TrainRow { step: k, diff_loss, gamma, beta_sp: beta_sp_eff, sp_loss, t };
        if let Some(s) = sinks.as_mut() {
            writeln!(
                s.train,
                "{},{},{},{},{},{}",
                row.step, row.diff_loss, row.gamma, row.beta_sp, row.sp_loss, row.t
            )?;
        }
        log.train.push(row);

        if let Some(dir) = outdir {
            let done = k + 1;
            if done % cfg.m_interval == 0 && cfg.l_b >= 2 {
                let s = similarity_matrix(&params)?;
                s.write_csv(&dir.join(format!("s_snapshot_{}.csv", done)))?;
            }
            if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && done < cfg.k_tot {
                super::save_checkpoint(&params, &cfg.to_lines(), done, &dir.join(format!("ckpt_{}.bin", done)))?;
            }
        }
    }

    if let Some(dir) = outdir {
        super::save_checkpoint(&params, &cfg.to_lines(), cfg.k_tot, &dir.join("checkpoint.bin"))?;
    }
    Ok(TrainOutcome { log, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
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
            ("k_tot", "30"),
            ("batch", "4"),
            ("n_train", "16"),
            ("monitor_size", "4"),
            ("n_eval", "4"),
            ("delta_k", "5"),
            ("m", "3"),
            ("m_interval", "20"),
            ("lr", "0.01"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn run_shapes_and_schedules() {
        let out = train(&tiny_cfg(), None).unwrap();
        assert_eq!(out.log.train.len(), 30);
        // Monitor fires at k = 5, 10, 15, 20, 25.
        assert_eq!(out.log.monitor.len(), 5);
        let steps: Vec<u64> = out.log.monitor.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![5, 10, 15, 20, 25]);
        // Window m = 3 fills at the third observation.
        assert!(out.log.monitor[0].g.is_none());
        assert!(out.log.monitor[1].g.is_none());
        assert!(out.log.monitor[2].g.is_some());
        assert_eq!(out.log.sampler.len(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train(&tiny_cfg(), None).unwrap();
        let b = train(&tiny_cfg(), None).unwrap();
        for (x, y) in a.log.train.iter().zip(&b.log.train) {
            assert_eq!(x.diff_loss.to_bits(), y.diff_loss.to_bits());
            assert_eq!(x.t, y.t);
        }
        for ((_, p), (_, q)) in a.params.named_tensors().iter().zip(b.params.named_tensors().iter()) {
            assert_eq!(p.data, q.data);
        }
    }

    #[test]
    fn loss_trends_down() {
        let mut cfg = tiny_cfg();
        cfg.set("k_tot", "150").unwrap();
        let out = train(&cfg, None).unwrap();
        let first: f64 = out.log.train[..20].iter().map(|r| r.diff_loss).sum::<f64>() / 20.0;
        let last: f64 = out.log.train[130..].iter().map(|r| r.diff_loss).sum::<f64>() / 20.0;
        assert!(last < first, "first {} last {}", first, last);
    }

    #[test]
    fn mechanisms_off_logs_zero_coefficients() {
        let out = train(&tiny_cfg(), None).unwrap();
        for r in &out.log.train {
            assert_eq!(r.gamma, 0.0);
            assert_eq!(r.beta_sp, 0.0);
            assert_eq!(r.sp_loss, 0.0);
        }
    }

    #[test]
    fn guidance_gamma_decays_to_zero() {
        let mut cfg = tiny_cfg();
        cfg.set("guidance_enabled", "true").unwrap();
        cfg.set("rho_ssl", "0.5").unwrap();
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.log.train[0].gamma, 1.0);
        let mut prev = f64::INFINITY;
        for r in &out.log.train {
            assert!(r.gamma <= prev);
            prev = r.gamma;
        }
        // rho_ssl * k_tot = 15: gamma is zero from there on.
        assert!(out.log.train[15..].iter().all(|r| r.gamma == 0.0));
    }

    #[test]
    fn output_files_written_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.set("ckpt_every", "10").unwrap();
        let out = train(&cfg, Some(dir.path())).unwrap();

        let train_csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        let lines: Vec<&str> = train_csv.lines().collect();
        assert_eq!(lines[0], "step,diff_loss,gamma,beta_sp,sp_loss,t");
        assert_eq!(lines.len(), 31);
        // Logged floats survive a text round trip exactly.
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[1].parse::<f64>().unwrap(), out.log.train[0].diff_loss);

        let mon = std::fs::read_to_string(dir.path().join("monitor.csv")).unwrap();
        assert!(mon.starts_with("step,ssl_loss,g,mu\n"));
        // Pre-window rows leave g and mu empty.
        assert!(mon.lines().nth(1).unwrap().ends_with(",,"));

        assert!(dir.path().join("s_snapshot_20.csv").exists());
        assert!(dir.path().join("ckpt_10.bin").exists());
        let ck = super::super::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ck.step, 30);
        for ((_, a), (_, b)) in ck.params.named_tensors().iter().zip(out.params.named_tensors().iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn divergent_lr_reports_step() {
        let mut cfg = tiny_cfg();
        cfg.set("lr", "1e6").unwrap();
        cfg.set("k_tot", "200").unwrap();
        match train(&cfg, None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn monitor_discrepancy_is_deterministic_and_finite() {
        let cfg = tiny_cfg();
        let ds = gen_dataset(cfg.task, 1, 0, 4, cfg.f, cfg.n, cfg.n_classes).unwrap();
        let enc = SslEncoder::new(2, cfg.f, cfg.d_h, cfg.d_ssl);
        let schedule = make_schedule(cfg.t_steps, cfg.beta_min, cfg.beta_max).unwrap();
        let p = init_params(3, cfg.d, cfg.f * cfg.n, cfg.l_b, cfg.n_classes, cfg.d_ssl).unwrap();
        let a = monitor_discrepancy(&p, &ds, &enc, &schedule, 7).unwrap();
        let b = monitor_discrepancy(&p, &ds, &enc, &schedule, 7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a.is_finite() && a > 0.0);
    }

    #[test]
    fn super_res_task_trains() {
        let mut cfg = tiny_cfg();
        cfg.set("task", "super_res").unwrap();
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.log.train.len(), 30);
        assert!(out.log.train.iter().all(|r| r.diff_loss.is_finite()));
    }
}
