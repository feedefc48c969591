//! Leaky ReLU, batch normalization and the pixel-wise softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn check_alpha(alpha: f32) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "leaky ReLU slope must lie in (0, 1), got {alpha}"
        )))
    }
}

#[inline]
pub fn leaky_relu(v: f32, alpha: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        alpha * v
    }
}

pub fn leaky_relu_forward(x: &Tensor, alpha: f32) -> Result<Tensor> {
    check_alpha(alpha)?;
    Ok(x.map(|v| leaky_relu(v, alpha)))
}

/// Slope is `alpha` on the closed non-positive branch, including exactly 0.
pub fn leaky_relu_backward(x: &Tensor, alpha: f32, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { alpha * g })
}

/// Per-channel statistics of a `[b,h,w,c]` tensor, accumulated in `f64`.
/// Returns `(mean, biased variance)`.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, _, _, c) = x.dims4()?;
    let n = (x.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((mean, var))
}

/// Saved quantities of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub fn batch_norm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f32,
) -> Result<(Tensor, BatchNormCache)> {
    let (b, h, w, c) = x.dims4()?;
    check_affine(gamma, beta, c)?;
    if b * h * w < 2 {
        return Err(Error::Contract(
            "training-mode batch normalization needs at least two values per channel".into(),
        ));
    }
    let (mean, var) = channel_stats(x)?;
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (v + epsilon as f64).sqrt()) as f32)
        .collect();
    let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            let n = (row[ch] - mean32[ch]) * inv_std[ch];
            xhat.push(n);
            y.push(gamma.data()[ch] * n + beta.data()[ch]);
        }
    }
    let cache = BatchNormCache {
        normalized: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        mean: mean32,
        var: var.iter().map(|&v| v as f32).collect(),
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_train_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let (_, _, _, c) = grad_out.dims4()?;
    let n = (grad_out.len() / c) as f64;
    let xhat = cache.normalized.data();
    let g = grad_out.data();
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_g[ch] += grow[ch] as f64;
            sum_gx[ch] += grow[ch] as f64 * xrow[ch] as f64;
        }
    }
    let mut dx = Vec::with_capacity(g.len());
    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            let scale = gamma.data()[ch] as f64 * cache.inv_std[ch] as f64 / n;
            let v = n * grow[ch] as f64 - sum_g[ch] - xrow[ch] as f64 * sum_gx[ch];
            dx.push((scale * v) as f32);
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::new([c], sum_gx.iter().map(|&v| v as f32).collect())?,
        beta: Tensor::new([c], sum_g.iter().map(|&v| v as f32).collect())?,
    })
}

/// Inference-mode normalization with fixed running statistics.
pub fn batch_norm_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    epsilon: f32,
) -> Result<(Tensor, Vec<f32>)> {
    let (_, _, _, c) = x.dims4()?;
    check_affine(gamma, beta, c)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::dim("batch_norm", "running statistics width mismatch"));
    }
    let inv_std: Vec<f32> = running_var
        .iter()
        .map(|&v| (1.0 / (v as f64 + epsilon as f64).sqrt()) as f32)
        .collect();
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            let n = (row[ch] - running_mean[ch]) * inv_std[ch];
            y.push(gamma.data()[ch] * n + beta.data()[ch]);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, inv_std))
}

fn check_affine(gamma: &Tensor, beta: &Tensor, c: usize) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(
            "batch_norm",
            format!(
                "affine parameters have {} / {} entries for {c} channels",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    Ok(())
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last_forward(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut sum = 0.0f64;
        for &v in row {
            let e = ((v - max) as f64).exp();
            sum += e;
            out.push(e as f32);
        }
        for p in &mut out[start..] {
            *p = (*p as f64 / sum) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

/// `dx = p * (g - <g, p>)` per row.
pub fn softmax_last_backward(prob: &Tensor, grad_out: &Tensor) -> Tensor {
    let c = *prob.shape().last().unwrap();
    let mut dx = Vec::with_capacity(prob.len());
    for (prow, grow) in prob.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        let dot: f64 = prow
            .iter()
            .zip(grow)
            .map(|(&p, &g)| p as f64 * g as f64)
            .sum();
        for (&p, &g) in prow.iter().zip(grow) {
            dx.push((p as f64 * (g as f64 - dot)) as f32);
        }
    }
    Tensor::new(prob.shape().to_vec(), dx).expect("softmax preserves shape")
}
