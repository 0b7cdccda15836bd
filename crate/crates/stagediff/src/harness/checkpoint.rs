//! Checkpoint persistence: a small text manifest followed by a raw
//! little-endian f32 payload. Loads validate the manifest against the payload
//! length before building any state, so a truncated file fails cleanly.

use crate::autodiff::Tensor;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "STAGEDIFF-CKPT v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_lines: Vec<String>,
    pub params: DenoiserParams,
}

pub fn save_checkpoint(
    params: &DenoiserParams,
    config_lines: &[String],
    step: u64,
    path: &Path,
) -> Result<()> {
    let named = params.named_tensors();
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("step {}\n", step));
    manifest.push_str(&format!("config {}\n", config_lines.len()));
    for line in config_lines {
        manifest.push_str(line);
        manifest.push('\n');
    }
    manifest.push_str(&format!("tensors {}\n", named.len()));
    let mut offset = 0usize;
    for (name, t) in &named {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {} {}\n", name, dims.join("x"), offset, t.numel()));
        offset += t.numel();
    }
    manifest.push_str(&format!("payload {}\n", offset * 4));

    let mut file = std::fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    let mut buf = Vec::with_capacity(offset * 4);
    for (_, t) in &named {
        for v in &t.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {}", path.display(), msg));

    let mut pos = 0usize;
    let next_line = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("truncated manifest"));
        }
        let line = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| bad("manifest is not valid UTF-8"))?
            .to_string();
        *pos += 1;
        Ok(line)
    };

    if next_line(&bytes, &mut pos)? != MAGIC {
        return Err(bad("bad magic header"));
    }
    let step_line = next_line(&bytes, &mut pos)?;
    let step: u64 = step_line
        .strip_prefix("step ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("malformed step line"))?;
    let n_config: usize = next_line(&bytes, &mut pos)?
        .strip_prefix("config ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("malformed config count"))?;
    let mut config_lines = Vec::with_capacity(n_config);
    for _ in 0..n_config {
        config_lines.push(next_line(&bytes, &mut pos)?);
    }
    let n_tensors: usize = next_line(&bytes, &mut pos)?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("malformed tensor count"))?;
    let mut entries = Vec::with_capacity(n_tensors);
    let mut expected_offset = 0usize;
    for _ in 0..n_tensors {
        let line = next_line(&bytes, &mut pos)?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 {
            return Err(bad("malformed tensor entry"));
        }
        let name = parts[0].to_string();
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad tensor shape")))
            .collect::<Result<_>>()?;
        let offset: usize = parts[2].parse().map_err(|_| bad("bad tensor offset"))?;
        let numel: usize = parts[3].parse().map_err(|_| bad("bad tensor size"))?;
        if shape.iter().product::<usize>() != numel {
            return Err(bad("tensor shape disagrees with element count"));
        }
        if offset != expected_offset {
            return Err(bad("tensor offsets are not contiguous"));
        }
        expected_offset += numel;
        entries.push((name, shape, offset, numel));
    }
    let payload_bytes: usize = next_line(&bytes, &mut pos)?
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("malformed payload line"))?;
    if payload_bytes != expected_offset * 4 {
        return Err(bad("payload size disagrees with manifest"));
    }
    if bytes.len() - pos != payload_bytes {
        return Err(bad("payload is truncated or padded"));
    }

    let payload = &bytes[pos..];
    let mut pairs = Vec::with_capacity(entries.len());
    for (name, shape, offset, numel) in entries {
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = (offset + i) * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().unwrap();
            let v = f32::from_le_bytes(raw) as f64;
            if !v.is_finite() {
                return Err(bad(&format!("non-finite value in tensor {}", name)));
            }
            data.push(v);
        }
        pairs.push((name, Tensor { shape, data }));
    }
    let params = DenoiserParams::from_named(pairs)?;
    Ok(Checkpoint { step, config_lines, params })
}
