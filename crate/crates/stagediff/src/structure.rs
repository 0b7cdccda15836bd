//! Block-similarity analysis (linear CKA), reference-pattern affinity, and the
//! graph-smoothness regularizer with its progress-dependent coefficient.

use crate::autodiff::Tensor;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// Pairwise block-relation pattern. Symmetric, unit diagonal, entries in [0, 1].
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub l_b: usize,
    /// Row-major [l_b, l_b].
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.l_b + j]
    }

    /// Mean and standard deviation of the off-diagonal entries.
    pub fn off_diagonal_stats(&self) -> (f64, f64) {
        let mut vals = Vec::new();
        for i in 0..self.l_b {
            for j in 0..self.l_b {
                if i != j {
                    vals.push(self.at(i, j));
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.l_b {
            if (self.at(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "similarity matrix diagonal [{0},{0}] = {1}, expected 1",
                    i,
                    self.at(i, i)
                )));
            }
            for j in 0..self.l_b {
                let v = self.at(i, j);
                if !(-1e-10..=1.0 + 1e-10).contains(&v) {
                    return Err(Error::Contract(format!(
                        "similarity entry [{},{}] = {} outside [0, 1]",
                        i, j, v
                    )));
                }
                if (v - self.at(j, i)).abs() > 1e-8 {
                    return Err(Error::Contract(format!(
                        "similarity matrix asymmetric at [{},{}]",
                        i, j
                    )));
                }
            }
        }
        Ok(())
    }

    /// CSV exchange schema: header row of block indices, then one row per block.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let header: Vec<String> = (0..self.l_b).map(|i| i.to_string()).collect();
        writeln!(f, "{}", header.join(","))?;
        for i in 0..self.l_b {
            let row: Vec<String> =
                (0..self.l_b).map(|j| format!("{}", self.at(i, j))).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract(format!("{}: empty similarity file", path.display())))??;
        let l_b = header.split(',').count();
        let mut values = Vec::with_capacity(l_b * l_b);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::Contract(format!(
                            "{}: bad value '{}' in row {}",
                            path.display(),
                            v,
                            i
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != l_b {
                return Err(Error::Contract(format!(
                    "{}: row {} has {} entries, expected {}",
                    path.display(),
                    i,
                    row.len(),
                    l_b
                )));
            }
            values.extend(row);
        }
        if values.len() != l_b * l_b {
            return Err(Error::Contract(format!(
                "{}: expected {} rows, got {}",
                path.display(),
                l_b,
                values.len() / l_b
            )));
        }
        let s = SimilarityMatrix { l_b, values };
        s.validate()?;
        Ok(s)
    }
}

/// Nonnegative symmetric affinity with zero diagonal, plus its degree vector.
#[derive(Debug, Clone)]
pub struct AffinityOperator {
    pub l_b: usize,
    /// Row-major [l_b, l_b].
    pub w: Vec<f64>,
    /// Degree d_i = sum_j w_ij.
    pub degree: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityNorm {
    /// Divide by the maximum row sum (keeps the infinity norm at most 1).
    MaxRowSum,
    /// Symmetric degree normalization D^{-1/2} A D^{-1/2}.
    SymDegree,
}

/// Centered block-level parameter representation: the block's square matrices
/// concatenated side by side [d, d * n_sq], each column shifted to zero mean.
/// Rows act as CKA samples.
pub fn block_representation(params: &DenoiserParams, block: usize) -> Result<Tensor> {
    let squares = crate::denoiser::blocks_square_weights(params);
    let pair = squares
        .get(block)
        .ok_or_else(|| Error::Contract(format!("block {} out of range", block)))?;
    if pair.is_empty() {
        return Err(Error::Contract(format!("block {} has no square matrices", block)));
    }
    let d = pair[0].shape[0];
    let total_cols: usize = pair.iter().map(|m| m.shape[1]).sum();
    let mut x = Tensor::zeros(&[d, total_cols]);
    let mut col0 = 0;
    for m in pair {
        let mc = m.shape[1];
        for r in 0..d {
            for c in 0..mc {
                x.data[r * total_cols + col0 + c] = m.data[r * mc + c];
            }
        }
        col0 += mc;
    }
    // Center each column.
    for c in 0..total_cols {
        let mean: f64 = (0..d).map(|r| x.data[r * total_cols + c]).sum::<f64>() / d as f64;
        for r in 0..d {
            x.data[r * total_cols + c] -= mean;
        }
    }
    Ok(x)
}

fn frob_of_gram(x: &Tensor, y: &Tensor) -> f64 {
    // ||X^T Y||_F^2 for column-centered inputs with equal row counts.
    let (rows, xc) = (x.shape[0], x.shape[1]);
    let yc = y.shape[1];
    let mut acc = 0.0;
    for i in 0..xc {
        for j in 0..yc {
            let mut dot = 0.0;
            for r in 0..rows {
                dot += x.data[r * xc + i] * y.data[r * yc + j];
            }
            acc += dot * dot;
        }
    }
    acc
}

/// Linear CKA: ||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered
/// inputs.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[0] != y.shape[0] {
        return Err(Error::shape("linear_cka", format!("{:?} vs {:?}", x.shape, y.shape)));
    }
    let xx = frob_of_gram(x, x).sqrt();
    let yy = frob_of_gram(y, y).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Contract("linear_cka: zero-norm input, similarity undefined".into()));
    }
    Ok(frob_of_gram(x, y) / (xx * yy))
}

/// Pairwise linear CKA between all blocks; unit diagonal by construction.
pub fn similarity_matrix(params: &DenoiserParams) -> Result<SimilarityMatrix> {
    let l_b = params.l_b();
    if l_b < 2 {
        return Err(Error::Contract(format!("similarity matrix needs >= 2 blocks, got {}", l_b)));
    }
    let reps: Vec<Tensor> =
        (0..l_b).map(|i| block_representation(params, i)).collect::<Result<_>>()?;
    let mut values = vec![0.0; l_b * l_b];
    for i in 0..l_b {
        values[i * l_b + i] = 1.0;
        for j in (i + 1)..l_b {
            let v = linear_cka(&reps[i], &reps[j])?;
            values[i * l_b + j] = v;
            values[j * l_b + i] = v;
        }
    }
    Ok(SimilarityMatrix { l_b, values })
}

/// Build the normalized affinity operator from a reference pattern: zero the
/// diagonal, clamp negatives, normalize.
pub fn build_affinity(s_ref: &SimilarityMatrix, norm: AffinityNorm) -> Result<AffinityOperator> {
    let l_b = s_ref.l_b;
    let mut a = vec![0.0; l_b * l_b];
    for i in 0..l_b {
        for j in 0..l_b {
            if i != j {
                a[i * l_b + j] = s_ref.at(i, j).max(0.0);
            }
        }
    }
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::Contract(
            "build_affinity: all off-diagonal entries are zero, no structure to encode".into(),
        ));
    }
    let row_sum = |m: &[f64], i: usize| -> f64 { m[i * l_b..(i + 1) * l_b].iter().sum() };
    let w = match norm {
        AffinityNorm::MaxRowSum => {
            let max_rs = (0..l_b).map(|i| row_sum(&a, i)).fold(0.0, f64::max);
            a.iter().map(|v| v / max_rs).collect::<Vec<f64>>()
        }
        AffinityNorm::SymDegree => {
            let deg: Vec<f64> = (0..l_b).map(|i| row_sum(&a, i)).collect();
            let mut w = vec![0.0; l_b * l_b];
            for i in 0..l_b {
                for j in 0..l_b {
                    if deg[i] > 0.0 && deg[j] > 0.0 {
                        w[i * l_b + j] = a[i * l_b + j] / (deg[i] * deg[j]).sqrt();
                    }
                }
            }
            w
        }
    };
    let degree: Vec<f64> = (0..l_b).map(|i| row_sum(&w, i)).collect();
    Ok(AffinityOperator { l_b, w, degree })
}

/// Stack block parameter columns: column i is the flattened concatenation of
/// block i's square matrices (uncentered).
pub fn block_stack(params: &DenoiserParams) -> Tensor {
    let squares = crate::denoiser::blocks_square_weights(params);
    let l_b = squares.len();
    let p: usize = squares[0].iter().map(|m| m.numel()).sum();
    let mut omega = Tensor::zeros(&[p, l_b]);
    for (i, pair) in squares.iter().enumerate() {
        let mut r = 0;
        for m in pair {
            for v in &m.data {
                omega.data[r * l_b + i] = *v;
                r += 1;
            }
        }
    }
    omega
}

/// Graph-smoothness penalty Tr((D - W) Omega^T Omega) and its gradient
/// 2 Omega (D - W).
pub fn sp_loss_and_grad(omega: &Tensor, aff: &AffinityOperator) -> Result<(f64, Tensor)> {
    if omega.shape.len() != 2 || omega.shape[1] != aff.l_b {
        return Err(Error::shape(
            "sp_loss_and_grad",
            format!("omega {:?} vs affinity with {} blocks", omega.shape, aff.l_b),
        ));
    }
    let (p, l_b) = (omega.shape[0], omega.shape[1]);
    // Gram G = Omega^T Omega.
    let mut gram = vec![0.0; l_b * l_b];
    for i in 0..l_b {
        for j in i..l_b {
            let mut dot = 0.0;
            for r in 0..p {
                dot += omega.data[r * l_b + i] * omega.data[r * l_b + j];
            }
            gram[i * l_b + j] = dot;
            gram[j * l_b + i] = dot;
        }
    }
    let mut loss = 0.0;
    for i in 0..l_b {
        loss += aff.degree[i] * gram[i * l_b + i];
        for j in 0..l_b {
            loss -= aff.w[i * l_b + j] * gram[j * l_b + i];
        }
    }
    // grad = 2 Omega (D - W)
    let mut grad = Tensor::zeros(&[p, l_b]);
    for r in 0..p {
        for j in 0..l_b {
            let mut acc = omega.data[r * l_b + j] * aff.degree[j];
            for i in 0..l_b {
                acc -= omega.data[r * l_b + i] * aff.w[i * l_b + j];
            }
            grad.data[r * l_b + j] = 2.0 * acc;
        }
    }
    Ok((loss, grad))
}

/// Progress-dependent regularizer coefficient: 1 / (1 + exp(g / s_phi)),
/// monotone decreasing in g.
pub fn beta_sp(g: f64, s_phi: f64) -> Result<f64> {
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("regime variable g = {}", g)));
    }
    if !(s_phi > 0.0) {
        return Err(Error::Config(format!("s_phi must be positive, got {}", s_phi)));
    }
    Ok(1.0 / (1.0 + (g / s_phi).exp()))
}
