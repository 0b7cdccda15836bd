//! Block-structured conditional denoiser.
//!
//! The denoiser maps a noisy latent, a timestep, a conditioning input, and an
//! optional masked SSL context to a noise prediction. Each block carries two
//! square weight matrices (the block's parameter-space signature for structural
//! analysis) and contributes through a residual path whose scale starts at
//! zero, so the fresh network is the input/output projection alone.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Conditioning input: a class id, or a low-band copy of the target
/// (full-length row-major spectrogram vector with the top rows zeroed).
#[derive(Debug, Clone)]
pub enum Condition {
    ClassLabel(usize),
    LowBand(Tensor),
}

#[derive(Debug, Clone)]
pub struct Block {
    /// Square [d, d], applied on the right: h . w
    pub w: Tensor,
    /// Square [d, d]
    pub v: Tensor,
    pub bias: Tensor,
    /// Residual output scale, initialized to zero.
    pub scale: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub d: usize,
    pub d_in: usize,
    pub n_classes: usize,
    pub d_ssl: usize,
    /// [d_in, d]
    pub proj_in: Tensor,
    /// [d, d_in]
    pub proj_out: Tensor,
    pub blocks: Vec<Block>,
    /// [n_classes, d]
    pub class_emb: Tensor,
    /// [d_in/2, d]
    pub low_proj: Tensor,
    /// [d_ssl, d]
    pub ssl_proj: Tensor,
    /// Scalar gain on the injected SSL context.
    pub ssl_gate: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
    }
}

pub fn init_params(
    seed: u64,
    d: usize,
    d_in: usize,
    l_b: usize,
    n_classes: usize,
    d_ssl: usize,
) -> Result<DenoiserParams> {
    if d < 1 || d_in < 1 || l_b < 1 || n_classes < 1 || d_ssl < 1 {
        return Err(Error::Config("init_params: all dims must be >= 1".into()));
    }
    if d_in % 2 != 0 {
        return Err(Error::Config(format!("init_params: d_in must be even, got {}", d_in)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = 1.0 / (d as f64).sqrt();
    let proj_in = gaussian(&mut rng, &[d_in, d], 1.0 / (d_in as f64).sqrt());
    let proj_out = gaussian(&mut rng, &[d, d_in], sd);
    let blocks = (0..l_b)
        .map(|_| Block {
            w: gaussian(&mut rng, &[d, d], sd),
            v: gaussian(&mut rng, &[d, d], sd),
            bias: Tensor::zeros(&[d]),
            scale: Tensor::scalar(0.0),
        })
        .collect();
    let class_emb = gaussian(&mut rng, &[n_classes, d], 1.0);
    let low_proj = gaussian(&mut rng, &[d_in / 2, d], 1.0 / ((d_in / 2) as f64).sqrt());
    let ssl_proj = gaussian(&mut rng, &[d_ssl, d], 1.0 / (d_ssl as f64).sqrt());
    let ssl_gate = Tensor::scalar(1.0);
    Ok(DenoiserParams {
        d,
        d_in,
        n_classes,
        d_ssl,
        proj_in,
        proj_out,
        blocks,
        class_emb,
        low_proj,
        ssl_proj,
        ssl_gate,
    })
}

impl DenoiserParams {
    pub fn l_b(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameter tensors, in a fixed order shared by the optimizer and the
    /// checkpoint format.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj_in".to_string(), &self.proj_in),
            ("proj_out".to_string(), &self.proj_out),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{}.w", i), &b.w));
            out.push((format!("blocks.{}.v", i), &b.v));
            out.push((format!("blocks.{}.bias", i), &b.bias));
            out.push((format!("blocks.{}.scale", i), &b.scale));
        }
        out.push(("class_emb".to_string(), &self.class_emb));
        out.push(("low_proj".to_string(), &self.low_proj));
        out.push(("ssl_proj".to_string(), &self.ssl_proj));
        out.push(("ssl_gate".to_string(), &self.ssl_gate));
        out
    }

    /// Mutable tensors in the same order as [`DenoiserParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.proj_in, &mut self.proj_out];
        for b in &mut self.blocks {
            out.push(&mut b.w);
            out.push(&mut b.v);
            out.push(&mut b.bias);
            out.push(&mut b.scale);
        }
        out.push(&mut self.class_emb);
        out.push(&mut self.low_proj);
        out.push(&mut self.ssl_proj);
        out.push(&mut self.ssl_gate);
        out
    }

    /// Rebuild from named tensors (checkpoint load).
    pub fn from_named(pairs: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor> = pairs.into_iter().collect();
        fn take(
            map: &mut std::collections::HashMap<String, Tensor>,
            name: &str,
        ) -> Result<Tensor> {
            map.remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))
        }
        let proj_in = take(&mut map, "proj_in")?;
        let proj_out = take(&mut map, "proj_out")?;
        if proj_in.shape.len() != 2 || proj_out.shape.len() != 2 {
            return Err(Error::Checkpoint("projection tensors must be 2-D".into()));
        }
        let d_in = proj_in.shape[0];
        let d = proj_in.shape[1];
        let mut blocks = Vec::new();
        let mut i = 0;
        while map.contains_key(&format!("blocks.{}.w", i)) {
            blocks.push(Block {
                w: take(&mut map, &format!("blocks.{}.w", i))?,
                v: take(&mut map, &format!("blocks.{}.v", i))?,
                bias: take(&mut map, &format!("blocks.{}.bias", i))?,
                scale: take(&mut map, &format!("blocks.{}.scale", i))?,
            });
            i += 1;
        }
        if blocks.is_empty() {
            return Err(Error::Checkpoint("no block tensors found".into()));
        }
        let class_emb = take(&mut map, "class_emb")?;
        let low_proj = take(&mut map, "low_proj")?;
        let ssl_proj = take(&mut map, "ssl_proj")?;
        let ssl_gate = take(&mut map, "ssl_gate")?;
        if !map.is_empty() {
            let mut extra: Vec<_> = map.into_keys().collect();
            extra.sort();
            return Err(Error::Checkpoint(format!("unexpected tensors: {}", extra.join(", "))));
        }
        let n_classes = class_emb.shape[0];
        let d_ssl = ssl_proj.shape[0];
        Ok(DenoiserParams {
            d,
            d_in,
            n_classes,
            d_ssl,
            proj_in,
            proj_out,
            blocks,
            class_emb,
            low_proj,
            ssl_proj,
            ssl_gate,
        })
    }
}

/// Ordered per-block square matrices (w_i, v_i); rectangular parameters never
/// appear here.
pub fn blocks_square_weights(params: &DenoiserParams) -> Vec<[&Tensor; 2]> {
    params.blocks.iter().map(|b| [&b.w, &b.v]).collect()
}

/// Tape handles for every parameter, registered once per training step.
pub struct ParamIds {
    pub proj_in: TensorId,
    pub proj_out: TensorId,
    pub blocks: Vec<BlockIds>,
    pub class_emb: TensorId,
    pub low_proj: TensorId,
    pub ssl_proj: TensorId,
    pub ssl_gate: TensorId,
}

pub struct BlockIds {
    pub w: TensorId,
    pub v: TensorId,
    pub bias: TensorId,
    pub scale: TensorId,
}

pub fn register_params(tape: &mut Tape, params: &DenoiserParams, requires_grad: bool) -> ParamIds {
    ParamIds {
        proj_in: tape.leaf(params.proj_in.clone(), requires_grad),
        proj_out: tape.leaf(params.proj_out.clone(), requires_grad),
        blocks: params
            .blocks
            .iter()
            .map(|b| BlockIds {
                w: tape.leaf(b.w.clone(), requires_grad),
                v: tape.leaf(b.v.clone(), requires_grad),
                bias: tape.leaf(b.bias.clone(), requires_grad),
                scale: tape.leaf(b.scale.clone(), requires_grad),
            })
            .collect(),
        class_emb: tape.leaf(params.class_emb.clone(), requires_grad),
        low_proj: tape.leaf(params.low_proj.clone(), requires_grad),
        ssl_proj: tape.leaf(params.ssl_proj.clone(), requires_grad),
        ssl_gate: tape.leaf(params.ssl_gate.clone(), requires_grad),
    }
}

impl ParamIds {
    /// Gradients read back in [`DenoiserParams::named_tensors`] order, zeros
    /// where a parameter received none.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        let mut ids = vec![self.proj_in, self.proj_out];
        for b in &self.blocks {
            ids.extend([b.w, b.v, b.bias, b.scale]);
        }
        ids.extend([self.class_emb, self.low_proj, self.ssl_proj, self.ssl_gate]);
        ids.iter()
            .map(|id| {
                tape.grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&tape.value(*id).shape))
            })
            .collect()
    }
}

/// Sinusoidal timestep embedding of width d.
pub fn time_embedding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; d];
    let half = d / 2;
    for j in 0..half {
        let freq = (10_000.0_f64).powf(-(j as f64) / half as f64);
        data[2 * j] = (t as f64 * freq).sin();
        data[2 * j + 1] = (t as f64 * freq).cos();
    }
    Tensor::vector(data)
}

/// Time-pool a d_ssl x N context to a d_ssl vector (mean over frames).
pub fn pool_context(ctx: &Tensor) -> Result<Tensor> {
    if ctx.shape.len() != 2 {
        return Err(Error::shape("pool_context", format!("{:?}", ctx.shape)));
    }
    let (rows, cols) = (ctx.shape[0], ctx.shape[1]);
    let mut data = vec![0.0; rows];
    for r in 0..rows {
        data[r] = ctx.data[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64;
    }
    Ok(Tensor::vector(data))
}

/// Batch conditioning, pre-assembled as constant matrices.
pub enum CondBatch {
    /// One-hot [B, n_classes]
    Class(Tensor),
    /// Low-band content [B, d_in/2]
    LowBand(Tensor),
}

pub fn make_cond_batch(conds: &[Condition], params: &DenoiserParams) -> Result<CondBatch> {
    let b = conds.len();
    if b == 0 {
        return Err(Error::Contract("make_cond_batch: empty batch".into()));
    }
    match &conds[0] {
        Condition::ClassLabel(_) => {
            let mut data = vec![0.0; b * params.n_classes];
            for (i, c) in conds.iter().enumerate() {
                match c {
                    Condition::ClassLabel(id) => {
                        if *id >= params.n_classes {
                            return Err(Error::Contract(format!(
                                "class id {} out of range [0, {})",
                                id, params.n_classes
                            )));
                        }
                        data[i * params.n_classes + id] = 1.0;
                    }
                    _ => return Err(Error::Contract("mixed condition kinds in batch".into())),
                }
            }
            Ok(CondBatch::Class(Tensor::matrix(b, params.n_classes, data)?))
        }
        Condition::LowBand(_) => {
            let half = params.d_in / 2;
            let mut data = vec![0.0; b * half];
            for (i, c) in conds.iter().enumerate() {
                match c {
                    Condition::LowBand(v) => {
                        if v.numel() != params.d_in {
                            return Err(Error::shape(
                                "make_cond_batch",
                                format!("low-band payload has {} entries, expected {}", v.numel(), params.d_in),
                            ));
                        }
                        data[i * half..(i + 1) * half].copy_from_slice(&v.data[..half]);
                    }
                    _ => return Err(Error::Contract("mixed condition kinds in batch".into())),
                }
            }
            Ok(CondBatch::LowBand(Tensor::matrix(b, half, data)?))
        }
    }
}

/// Batched forward pass: z_t is [B, d_in], ssl_pooled (optional) is [B, d_ssl].
/// Returns the noise prediction [B, d_in]. An absent context contributes
/// exactly zero.
pub fn denoise_batch(
    tape: &mut Tape,
    ids: &ParamIds,
    params: &DenoiserParams,
    z_t: TensorId,
    t: usize,
    t_steps: usize,
    cond: &CondBatch,
    ssl_pooled: Option<TensorId>,
) -> Result<TensorId> {
    if t >= t_steps {
        return Err(Error::Contract(format!("denoise: timestep {} out of range [0, {})", t, t_steps)));
    }
    let mut h = tape.matmul(z_t, ids.proj_in)?;
    let temb = tape.constant(time_embedding(t, params.d));
    h = tape.broadcast_add(h, temb)?;
    let cemb = match cond {
        CondBatch::Class(onehot) => {
            let oh = tape.constant(onehot.clone());
            tape.matmul(oh, ids.class_emb)?
        }
        CondBatch::LowBand(low) => {
            let lo = tape.constant(low.clone());
            tape.matmul(lo, ids.low_proj)?
        }
    };
    h = tape.add(h, cemb)?;
    if let Some(ctx) = ssl_pooled {
        let inj = tape.matmul(ctx, ids.ssl_proj)?;
        let gated = tape.mul(ids.ssl_gate, inj)?;
        h = tape.add(h, gated)?;
    }
    for b in &ids.blocks {
        let pre = tape.matmul(h, b.w)?;
        let pre = tape.broadcast_add(pre, b.bias)?;
        let act = tape.gelu(pre);
        let vout = tape.matmul(act, b.v)?;
        let scaled = tape.mul(b.scale, vout)?;
        h = tape.add(h, scaled)?;
    }
    tape.matmul(h, ids.proj_out)
}

/// Single-sample forward without gradient recording.
pub fn denoise(
    params: &DenoiserParams,
    z_t: &Tensor,
    t: usize,
    t_steps: usize,
    cond: &Condition,
    ssl_ctx: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params, false);
    let z = tape.constant(Tensor::matrix(1, z_t.numel(), z_t.data.clone())?);
    let cb = make_cond_batch(std::slice::from_ref(cond), params)?;
    let pooled = match ssl_ctx {
        Some(ctx) => {
            let p = pool_context(ctx)?;
            Some(tape.constant(Tensor::matrix(1, p.numel(), p.data)?))
        }
        None => None,
    };
    let out = denoise_batch(&mut tape, &ids, params, z, t, t_steps, &cb, pooled)?;
    Ok(Tensor::vector(tape.value(out).data.clone()))
}
