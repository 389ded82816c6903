//! Fine-tuning of a compressed model against its uncompressed teacher.
//!
//! Three regimes: post-training (unlabelled synthetic data, per-layer MSE),
//! few-sample (small labeled subset, combined per-layer MSE + softened KL +
//! cross-entropy), and full training (cross-entropy only). The teacher always
//! runs in eval mode without gradients; the student's BN layers normalize
//! with their frozen running statistics while their affine parameters train,
//! so the student's statistics stay anchored to the teacher's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{evaluate, ForwardOptions, LayerId, NetworkGraph};
use crate::optim::Sgd;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{softmax_slice, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    PostTraining,
    FewSample,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub regime: Regime,
    pub alpha_kd: f32,
    pub t_kd: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_init: f32,
    /// Epochs without metric improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    /// Training stops once the learning rate falls below this.
    pub lr_stop: f32,
    pub batch_size: usize,
    /// Hard stop; the plateau rule usually fires first.
    pub max_epochs: usize,
    pub seed: u64,
}

impl DistillConfig {
    pub fn for_regime(regime: Regime) -> DistillConfig {
        DistillConfig {
            regime,
            alpha_kd: 0.95,
            t_kd: 6.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_init: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.1,
            lr_stop: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            seed: 0,
        }
    }
}

fn student_forward_opts<'a>(capture: bool) -> ForwardOptions<'a> {
    // Eval-mode normalization keeps BN running statistics frozen while the
    // affine parameters still receive gradients.
    ForwardOptions {
        train: false,
        capture_conv: capture,
        ..Default::default()
    }
}

/// Captured teacher signals for one batch, detached from any graph.
struct TeacherSignals {
    logits: Tensor,
    conv: Vec<(LayerId, Tensor)>,
}

fn teacher_signals(teacher: &NetworkGraph, batch: &Tensor, capture: bool) -> Result<TeacherSignals> {
    let mut opts = ForwardOptions {
        capture_conv: capture,
        ..Default::default()
    };
    let out = teacher.forward(batch, &mut opts)?;
    Ok(TeacherSignals {
        logits: out.logits.detach(),
        conv: out
            .conv_outputs
            .into_iter()
            .map(|(id, t)| (id, t.detach()))
            .collect(),
    })
}

/// Sum over the compression-target layers of the mean squared difference
/// between the student's block outputs and the teacher's conv outputs.
pub fn per_layer_mse_loss(
    student: &NetworkGraph,
    teacher: &NetworkGraph,
    batch: &Tensor,
) -> Result<Tensor> {
    let signals = teacher_signals(teacher, batch, true)?;
    let mut opts = student_forward_opts(true);
    let out = student.forward(batch, &mut opts)?;
    per_layer_mse_from(&out.conv_outputs, &signals.conv, student.targets())
}

fn per_layer_mse_from(
    student_conv: &std::collections::BTreeMap<LayerId, Tensor>,
    teacher_conv: &[(LayerId, Tensor)],
    targets: &[LayerId],
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &id in targets {
        let s = student_conv.get(&id).ok_or_else(|| {
            Error::Contract(format!("student has no captured output for target layer {id}"))
        })?;
        let t = teacher_conv
            .iter()
            .find(|(tid, _)| *tid == id)
            .map(|(_, t)| t)
            .ok_or_else(|| {
                Error::Contract(format!("teacher has no captured output for target layer {id}"))
            })?;
        let term = s.sq_diff_mean(t)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no target layers to distill".into()))
}

/// Few-sample loss: per-layer MSE plus `alpha*T^2*KL(teacher || student)` on
/// temperature-softened logits plus `(1-alpha)` cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn kd_loss(
    student_logits: &Tensor,
    student_conv: &std::collections::BTreeMap<LayerId, Tensor>,
    teacher_logits: &Tensor,
    teacher_conv: &[(LayerId, Tensor)],
    targets: &[LayerId],
    labels: &[usize],
    alpha_kd: f32,
    t_kd: f32,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_kd) || t_kd <= 0.0 {
        return Err(Error::Contract(format!(
            "alpha_kd {alpha_kd} must lie in [0,1] and t_kd {t_kd} must be positive"
        )));
    }
    let mut loss = if targets.is_empty() {
        Tensor::scalar(0.0)
    } else {
        per_layer_mse_from(student_conv, teacher_conv, targets)?
    };
    if alpha_kd > 0.0 {
        let tl = teacher_logits.to_vec();
        let c = teacher_logits.shape()[1];
        let mut probs = Vec::with_capacity(tl.len());
        for row in tl.chunks(c) {
            let soft: Vec<f32> = row.iter().map(|v| v / t_kd).collect();
            probs.extend(softmax_slice(&soft));
        }
        let kl = student_logits.kl_from_teacher_mean(&probs, t_kd)?;
        loss = loss.add(&kl.scale(alpha_kd * t_kd * t_kd))?;
    }
    if alpha_kd < 1.0 {
        let ce = student_logits.cross_entropy_mean(labels)?;
        loss = loss.add(&ce.scale(1.0 - alpha_kd))?;
    }
    Ok(loss)
}

/// Unlabeled or labeled data feeding one fine-tuning run.
pub struct DistillData<'a> {
    pub train_images: &'a [f32],
    /// Required for the few-sample and full regimes.
    pub train_labels: Option<&'a [usize]>,
    /// Plateau and checkpoint signal: labeled validation for few-sample and
    /// full, a held-out synthetic slice for post-training.
    pub val_images: &'a [f32],
    pub val_labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub loss: f64,
    pub lr: f32,
    /// Validation top-1 (few-sample/full) or held-out per-layer MSE (post).
    pub metric: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

fn batch_tensor(images: &[f32], shape: [usize; 3], idx: &[usize]) -> Result<Tensor> {
    let pix: usize = shape.iter().product();
    let mut data = Vec::with_capacity(idx.len() * pix);
    for &i in idx {
        data.extend_from_slice(&images[i * pix..(i + 1) * pix]);
    }
    Tensor::from_vec(&[idx.len(), shape[0], shape[1], shape[2]], data)
}

/// Fine-tune `student` against `teacher` under the config's regime, returning
/// the checkpoint with the best validation metric. The inputs are never
/// modified; the returned graph owns fresh parameters.
pub fn finetune(
    student: &NetworkGraph,
    teacher: &NetworkGraph,
    data: &DistillData<'_>,
    cfg: &DistillConfig,
) -> Result<(NetworkGraph, TrainLog)> {
    let shape = student.input_shape();
    let pix: usize = shape.iter().product();
    if data.train_images.is_empty() || data.train_images.len() % pix != 0 {
        return Err(Error::Contract("training images empty or misaligned".into()));
    }
    let n = data.train_images.len() / pix;
    match cfg.regime {
        Regime::FewSample | Regime::Full => {
            let labels = data
                .train_labels
                .ok_or_else(|| Error::Contract("labeled regime requires train labels".into()))?;
            if labels.len() != n {
                return Err(Error::Contract("label count mismatch".into()));
            }
            if data.val_labels.is_none() {
                return Err(Error::Contract("labeled regime requires validation labels".into()));
            }
        }
        Regime::PostTraining => {}
    }
    // Validate the layer correspondence once up front.
    for &id in student.targets() {
        teacher.layer(id).map_err(|_| {
            Error::Contract(format!("teacher has no layer matching student target {id}"))
        })?;
    }

    let work = student.deep_clone();
    let params = work.trainable_params();
    let mut opt = Sgd::new(cfg.lr_init, cfg.momentum, cfg.weight_decay);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);

    let higher_is_better = !matches!(cfg.regime, Regime::PostTraining);

    let eval_metric = |g: &NetworkGraph| -> Result<f64> {
        match cfg.regime {
            Regime::PostTraining => {
                // Held-out synthetic slice, per-layer MSE (lower is better).
                let m = data.val_images.len() / pix;
                let mut total = 0.0;
                let mut batches = 0usize;
                for chunk in (0..m).collect::<Vec<_>>().chunks(cfg.batch_size.max(1)) {
                    let batch = batch_tensor(data.val_images, shape, chunk)?;
                    total += per_layer_mse_loss(g, teacher, &batch)?.item() as f64;
                    batches += 1;
                }
                Ok(total / batches.max(1) as f64)
            }
            _ => {
                let labels = data.val_labels.expect("validated above");
                let m = data.val_images.len() / pix;
                let mut batches = Vec::new();
                for chunk in (0..m).collect::<Vec<_>>().chunks(cfg.batch_size.max(1)) {
                    let batch = batch_tensor(data.val_images, shape, chunk)?;
                    let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    batches.push((batch, lab));
                }
                Ok(evaluate(g, &batches)?.0)
            }
        }
    };

    let mut log = TrainLog::default();
    let metric0 = eval_metric(&work)?;
    let mut best_metric = metric0;
    let mut best_params: Vec<Vec<f32>> = params.iter().map(|p| p.to_vec()).collect();
    log.best_metric = best_metric;
    let mut stagnant = 0usize;
    let mut epoch = 0usize;

    while opt.lr >= cfg.lr_stop && epoch < cfg.max_epochs {
        // Seeded shuffle each epoch.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batch_count = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = batch_tensor(data.train_images, shape, chunk)?;
            let loss = match cfg.regime {
                Regime::PostTraining => per_layer_mse_loss(&work, teacher, &batch)?,
                Regime::FewSample => {
                    let labels: Vec<usize> = chunk
                        .iter()
                        .map(|&i| data.train_labels.expect("validated")[i])
                        .collect();
                    let signals = teacher_signals(teacher, &batch, true)?;
                    let mut opts = student_forward_opts(true);
                    let out = work.forward(&batch, &mut opts)?;
                    kd_loss(
                        &out.logits,
                        &out.conv_outputs,
                        &signals.logits,
                        &signals.conv,
                        work.targets(),
                        &labels,
                        cfg.alpha_kd,
                        cfg.t_kd,
                    )?
                }
                Regime::Full => {
                    let labels: Vec<usize> = chunk
                        .iter()
                        .map(|&i| data.train_labels.expect("validated")[i])
                        .collect();
                    let mut opts = student_forward_opts(false);
                    let out = work.forward(&batch, &mut opts)?;
                    out.logits.cross_entropy_mean(&labels)?
                }
            };
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("distillation loss diverged to {lv}"),
                });
            }
            epoch_loss += lv;
            batch_count += 1;
            for p in &params {
                p.zero_grad();
            }
            loss.backward()?;
            opt.step(&params);
        }

        let metric = eval_metric(&work)?;
        log.epochs.push(EpochRecord {
            loss: epoch_loss / batch_count.max(1) as f64,
            lr: opt.lr,
            metric,
        });
        let improved = if higher_is_better {
            metric > best_metric + 1e-9
        } else {
            metric < best_metric - 1e-9
        };
        if improved {
            best_metric = metric;
            best_params = params.iter().map(|p| p.to_vec()).collect();
            log.best_epoch = epoch + 1;
            log.best_metric = metric;
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= cfg.plateau_patience {
                opt.lr *= cfg.plateau_factor;
                stagnant = 0;
            }
        }
        epoch += 1;
    }

    // Restore the best checkpoint.
    for (p, best) in params.iter().zip(&best_params) {
        p.set_data(best);
        p.zero_grad();
    }
    Ok((work, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_desk_model, Replacement};
    use crate::lrspace::{derive_weights, BlockConfig, BranchPlan};
    use crate::graph::{BuildingBlock, LayerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_student_has_zero_mse() {
        let g = build_desk_model(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Tensor::randn(&[2, 3, 16, 16], &mut rng);
        let loss = per_layer_mse_loss(&g, &g, &batch).unwrap();
        assert!(loss.item().abs() < 1e-9);
    }

    #[test]
    fn full_rank_block_student_mse_is_negligible() {
        let teacher = build_desk_model(2).unwrap();
        let target = teacher.targets()[0];
        let LayerKind::Conv(orig) = &teacher.layer(target).unwrap().kind else {
            panic!()
        };
        let cfg = BlockConfig {
            kernel0: (3, 3),
            kernel1: (1, 1),
            groups0: 1,
            groups1: 1,
            rank: 16,
        };
        let (w0, w1) = derive_weights(&orig.weight, &cfg).unwrap();
        let block = BuildingBlock::from_plan(orig, &BranchPlan::single(cfg, w0, w1)).unwrap();
        let student = teacher.substitute(target, Replacement::Block(block)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Tensor::randn(&[2, 3, 16, 16], &mut rng);
        let loss = per_layer_mse_loss(&student, &teacher, &batch).unwrap();
        assert!(loss.item() < 1e-6, "{}", loss.item());
    }

    #[test]
    fn kd_loss_hand_fixture() {
        // 2-class, teacher logits (1,0), student (0,1), T=1, alpha=0.95,
        // no layer terms: loss = alpha*1*KL + (1-alpha)*CE.
        let student = Tensor::param(&[1, 2], vec![0.0, 1.0]).unwrap();
        let teacher = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let empty = std::collections::BTreeMap::new();
        let total = kd_loss(&student, &empty, &teacher, &[], &[], &[0], 0.95, 1.0).unwrap();
        let p = [
            (1.0f64).exp() / ((1.0f64).exp() + 1.0),
            1.0 / ((1.0f64).exp() + 1.0),
        ];
        let q = [
            1.0 / (1.0 + (1.0f64).exp()),
            (1.0f64).exp() / (1.0 + (1.0f64).exp()),
        ];
        let kl_hand = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let ce_hand = -(q[0]).ln();
        let expect = 0.95 * kl_hand + 0.05 * ce_hand;
        assert!((total.item() as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn kd_loss_endpoints_drop_terms() {
        let teacher = build_desk_model(2).unwrap();
        let student = teacher.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Tensor::randn(&[2, 3, 16, 16], &mut rng);
        let labels = vec![1usize, 4];
        let signals = teacher_signals(&teacher, &batch, true).unwrap();
        let mut opts = student_forward_opts(true);
        let out = student.forward(&batch, &mut opts).unwrap();

        // alpha = 1: pure KL, identical nets -> only the (vanishing) MSE+KL.
        let l1 = kd_loss(
            &out.logits, &out.conv_outputs, &signals.logits, &signals.conv,
            student.targets(), &labels, 1.0, 1.0,
        )
        .unwrap();
        assert!(l1.item().abs() < 1e-6);

        // alpha = 0: MSE + CE only; equals CE for the identical student.
        let l0 = kd_loss(
            &out.logits, &out.conv_outputs, &signals.logits, &signals.conv,
            student.targets(), &labels, 0.0, 1.0,
        )
        .unwrap();
        let ce = out.logits.cross_entropy_mean(&labels).unwrap();
        assert!((l0.item() - ce.item()).abs() < 1e-6);
    }
}
