//! Batch normalization over NCHW activations.
//!
//! Train mode normalizes with the current batch statistics (population
//! variance) and folds them into the running buffers with the given momentum;
//! momentum 0 leaves the buffers untouched. Eval mode normalizes with the
//! running buffers.

use super::ops::BnBackCtx;
use super::{OpKind, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics of the forward pass that produced them.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Population standard deviation (denominator n).
    pub std: Vec<f32>,
}

/// Normalize `input` with the given affine parameters and statistics state.
///
/// Returns the output plus the batch statistics of this pass (mean and
/// population std per channel); in eval mode the batch statistics are still
/// computed and returned but the running buffers are never touched.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
    momentum: f32,
) -> Result<(Tensor, BatchStats)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("batch_norm expects NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm {name} shape {:?} != [{c}]",
                t.shape()
            )));
        }
    }

    let count = (n * h * w) as f64;
    let x = input.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for k in 0..h * w {
                let v = x[base + k] as f64;
                sum += v;
                sq += v * v;
            }
        }
        let m = sum / count;
        mean[ci] = m as f32;
        var[ci] = ((sq / count - m * m).max(0.0)) as f32;
    }
    drop(x);

    let (norm_mean, norm_var) = match mode {
        BnMode::Train => (mean.clone(), var.clone()),
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };

    if mode == BnMode::Train && momentum != 0.0 {
        running_mean.update_data(|r| {
            for (r, m) in r.iter_mut().zip(&mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
        });
        running_var.update_data(|r| {
            for (r, v) in r.iter_mut().zip(&var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        });
    }

    let x = input.data();
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0f32; x.len()];
    for ci in 0..c {
        let inv = 1.0 / (norm_var[ci] + BN_EPS).sqrt();
        let (gc, bc, mc) = (g[ci], b[ci], norm_mean[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for k in 0..h * w {
                out[base + k] = gc * (x[base + k] - mc) * inv + bc;
            }
        }
    }
    drop(x);
    drop(g);
    drop(b);

    let stats = BatchStats {
        mean,
        std: var.iter().map(|v| v.sqrt()).collect(),
    };
    let ctx = BnBackCtx {
        eps: BN_EPS,
        train: mode == BnMode::Train,
        mean: norm_mean,
        var: norm_var,
    };
    let out = Tensor::from_op(
        s.to_vec(),
        out,
        OpKind::BatchNorm(ctx),
        vec![input.clone(), gamma.clone(), beta.clone()],
    );
    Ok((out, stats))
}

pub(crate) fn batch_norm_backward(
    gout: &[f32],
    ctx: &BnBackCtx,
    parents: &[Tensor],
) -> Vec<Option<Vec<f32>>> {
    let input = &parents[0];
    let gamma = &parents[1];
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let count = (n * h * w) as f32;
    let x = input.data();
    let g = gamma.data();

    let mut gx = vec![0.0f32; x.len()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ci in 0..c {
        let inv = 1.0 / (ctx.var[ci] + ctx.eps).sqrt();
        let mc = ctx.mean[ci];
        // Accumulate sums of dy and dy*xhat for the train-mode correction.
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for k in 0..h * w {
                let dy = gout[base + k] as f64;
                let xhat = ((x[base + k] - mc) * inv) as f64;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        ggamma[ci] = sum_dy_xhat as f32;
        gbeta[ci] = sum_dy as f32;
        let mean_dy = (sum_dy / count as f64) as f32;
        let mean_dy_xhat = (sum_dy_xhat / count as f64) as f32;
        let gc = g[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for k in 0..h * w {
                let dy = gout[base + k];
                let xhat = (x[base + k] - mc) * inv;
                gx[base + k] = if ctx.train {
                    gc * inv * (dy - mean_dy - xhat * mean_dy_xhat)
                } else {
                    gc * inv * dy
                };
            }
        }
    }
    vec![Some(gx), Some(ggamma), Some(gbeta)]
}
