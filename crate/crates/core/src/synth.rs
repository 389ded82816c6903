//! Data-free synthetic image generation: optimize random images so the batch
//! statistics they induce at every BN layer match the stored running
//! statistics, with the image batch itself pulled toward zero mean and unit
//! variance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ForwardOptions, LayerId, LayerKind, NetworkGraph};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Per-BN-layer running statistics extracted from a pretrained graph.
#[derive(Debug, Clone)]
pub struct BnTargets {
    /// (layer, running mean, running std) in topological order.
    pub layers: Vec<(LayerId, Vec<f32>, Vec<f32>)>,
}

pub fn extract_bn_targets(graph: &NetworkGraph) -> Result<BnTargets> {
    let mut layers = Vec::new();
    for layer in graph.layers() {
        if let LayerKind::BatchNorm(spec) = &layer.kind {
            let mean = spec.running_mean.to_vec();
            let std: Vec<f32> = spec.running_var.to_vec().iter().map(|v| v.max(0.0).sqrt()).collect();
            if std.iter().any(|s| *s <= 0.0) {
                return Err(Error::Contract(format!(
                    "layer {} has a zero-variance channel; pretrain before extracting targets",
                    layer.id
                )));
            }
            layers.push((layer.id, mean, std));
        }
    }
    if layers.is_empty() {
        return Err(Error::Contract("graph has no batch normalization layers".into()));
    }
    Ok(BnTargets { layers })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Weight of the image-statistics term.
    pub alpha: f32,
    pub iterations: usize,
    pub lr: f32,
    /// Iterations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub batch_size: usize,
    /// Average each BN layer's term over its channel count.
    pub scaled: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alpha: 1.0,
            iterations: 500,
            lr: 0.25,
            plateau_patience: 100,
            plateau_factor: 0.1,
            batch_size: 32,
            scaled: true,
            seed: 0,
        }
    }
}

const VAR_EPS: f32 = 1e-12;

fn square(x: &Tensor) -> Result<Tensor> {
    x.mul(x)
}

/// The statistics-matching loss, differentiable with respect to `images`.
///
/// `alpha*[mean(I)^2 + (std(I)-1)^2]` plus, per BN layer, the summed squared
/// distance of the batch channel statistics from the stored running ones,
/// optionally averaged over that layer's channel count. Running buffers are
/// never touched by the internal forward.
pub fn bn_loss(
    images: &Tensor,
    graph: &NetworkGraph,
    targets: &BnTargets,
    alpha: f32,
    scaled: bool,
) -> Result<Tensor> {
    let mut opts = ForwardOptions {
        train: true,
        capture_bn_inputs: true,
        bn_momentum: Some(0.0),
        ..Default::default()
    };
    let out = graph.forward(images, &mut opts)?;

    // Image term: batch mean and population std over all pixels.
    let m = images.mean_all();
    let m2 = square(images)?.mean_all();
    let var = m2.sub(&square(&m)?)?;
    let std = var.add_const(VAR_EPS).sqrt_elem();
    let image_term = square(&m)?.add(&square(&std.add_const(-1.0))?)?;

    let mut total = image_term.scale(alpha);
    for (layer, t_mean, t_std) in &targets.layers {
        let pre = out.bn_inputs.get(layer).ok_or_else(|| {
            Error::Contract(format!("BN layer {layer} missing from capture"))
        })?;
        let cm = pre.channel_mean()?;
        let cvar = pre.channel_sq_mean()?.sub(&square(&cm)?)?;
        let cstd = cvar.add_const(VAR_EPS).sqrt_elem();
        let tm = Tensor::from_vec(&[t_mean.len()], t_mean.clone())?;
        let ts = Tensor::from_vec(&[t_std.len()], t_std.clone())?;
        let term = cm.sq_diff_sum(&tm)?.add(&cstd.sq_diff_sum(&ts)?)?;
        let term = if scaled {
            term.scale(1.0 / t_mean.len() as f32)
        } else {
            term
        };
        total = total.add(&term)?;
    }
    Ok(total)
}

/// One generated batch's optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchTrace {
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub struct SynthOutcome {
    /// `count` images, NCHW, floating point.
    pub images: Vec<f32>,
    pub shape: [usize; 3],
    pub traces: Vec<BatchTrace>,
    /// Batches that failed to reach 10% of their initial loss.
    pub warnings: Vec<String>,
}

/// Generate `count` synthetic images in independently seeded batches.
pub fn generate(graph: &NetworkGraph, cfg: &SynthConfig, count: usize) -> Result<SynthOutcome> {
    let targets = extract_bn_targets(graph)?;
    let [c, h, w] = graph.input_shape();
    let num_batches = count.div_ceil(cfg.batch_size.max(1));
    let results: Vec<Result<(Vec<f32>, BatchTrace)>> = (0..num_batches)
        .into_par_iter()
        .map(|b| {
            let stream = cfg.seed ^ (b as u64).wrapping_mul(0x9E3779B97F4A7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let data = Tensor::randn(&[cfg.batch_size, c, h, w], &mut rng).to_vec();
            let images = Tensor::param(&[cfg.batch_size, c, h, w], data)?;
            let mut adam = Adam::new(cfg.lr, (0.9, 0.999), 0.0);
            let mut best = f64::INFINITY;
            let mut stagnant = 0usize;
            let mut initial = 0.0f64;
            let mut last = 0.0f64;
            for it in 0..cfg.iterations {
                images.zero_grad();
                let loss = bn_loss(&images, graph, &targets, cfg.alpha, cfg.scaled)?;
                let lv = loss.item() as f64;
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!(
                        "synthesis loss diverged at iteration {it} of batch {b}"
                    )));
                }
                if it == 0 {
                    initial = lv;
                }
                last = lv;
                if lv < best - 1e-9 {
                    best = lv;
                    stagnant = 0;
                } else {
                    stagnant += 1;
                    if stagnant >= cfg.plateau_patience {
                        adam.lr *= cfg.plateau_factor;
                        stagnant = 0;
                    }
                }
                loss.backward()?;
                adam.step(std::slice::from_ref(&images));
            }
            Ok((
                images.to_vec(),
                BatchTrace {
                    initial_loss: initial,
                    final_loss: last,
                },
            ))
        })
        .collect();

    let pix = c * h * w;
    let mut images = Vec::with_capacity(count * pix);
    let mut traces = Vec::with_capacity(num_batches);
    let mut warnings = Vec::new();
    for (b, res) in results.into_iter().enumerate() {
        let (batch_images, trace) = res?;
        let keep = (count - b * cfg.batch_size).min(cfg.batch_size);
        images.extend_from_slice(&batch_images[..keep * pix]);
        if cfg.iterations > 0 && trace.final_loss > 0.1 * trace.initial_loss {
            warnings.push(format!(
                "batch {b}: loss {:.4} -> {:.4} missed the 10% reduction target",
                trace.initial_loss, trace.final_loss
            ));
        }
        traces.push(trace);
    }
    Ok(SynthOutcome {
        images,
        shape: [c, h, w],
        traces,
        warnings,
    })
}
