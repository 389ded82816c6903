//! Central finite-difference checks for every differentiable operation:
//! convolution, batch norm, Gumbel-Softmax, the statistics-matching loss, the
//! search loss and the distillation loss.

mod common;

use common::{finite_diff_grad, grad_rel_err};
use lrnas_core::graph::{build_desk_model, BnSpec, ConvSpec, GraphBuilder, LayerKind, Port};
use lrnas_core::search::nas_loss;
use lrnas_core::synth::{bn_loss, extract_bn_targets};
use lrnas_core::tensor::{batch_norm, conv2d, gumbel_softmax, softmax_slice, BnMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;

#[test]
fn conv2d_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::param(&[1, 2, 5, 5], Tensor::randn(&[1, 2, 5, 5], &mut rng).to_vec()).unwrap();
    let w = Tensor::param(&[3, 2, 3, 3], Tensor::randn(&[3, 2, 3, 3], &mut rng).to_vec()).unwrap();
    // loss = sum(conv, squared)
    let loss_fn = |x: &Tensor, w: &Tensor| {
        let y = conv2d(x, w, None, (1, 1), (1, 1), 1).unwrap();
        y.mul(&y).unwrap().sum_all()
    };
    let loss = loss_fn(&x, &w);
    loss.backward().unwrap();

    let fd_w = finite_diff_grad(&w, H, || loss_fn(&x, &w).item());
    let err = grad_rel_err(&w.grad().unwrap(), &fd_w);
    assert!(err < TOL, "weight gradient error {err}");

    let fd_x = finite_diff_grad(&x, H, || loss_fn(&x, &w).item());
    let err = grad_rel_err(&x.grad().unwrap(), &fd_x);
    assert!(err < TOL, "input gradient error {err}");
}

#[test]
fn strided_grouped_conv_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::param(&[2, 4, 6, 6], Tensor::randn(&[2, 4, 6, 6], &mut rng).to_vec()).unwrap();
    let w = Tensor::param(&[4, 2, 3, 1], Tensor::randn(&[4, 2, 3, 1], &mut rng).to_vec()).unwrap();
    let b = Tensor::param(&[4], Tensor::randn(&[4], &mut rng).to_vec()).unwrap();
    let loss_fn = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let y = conv2d(x, w, Some(b), (2, 1), (1, 0), 2).unwrap();
        y.mul(&y).unwrap().sum_all()
    };
    let loss = loss_fn(&x, &w, &b);
    loss.backward().unwrap();
    for (name, t) in [("x", &x), ("w", &w), ("b", &b)] {
        let fd = finite_diff_grad(t, H, || loss_fn(&x, &w, &b).item());
        let err = grad_rel_err(&t.grad().unwrap(), &fd);
        assert!(err < TOL, "{name} gradient error {err}");
    }
}

#[test]
fn batch_norm_gradients_match_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for mode in [BnMode::Train, BnMode::Eval] {
        let x = Tensor::param(&[3, 2, 4, 4], Tensor::randn(&[3, 2, 4, 4], &mut rng).to_vec()).unwrap();
        let g = Tensor::param(&[2], vec![1.2, 0.8]).unwrap();
        let b = Tensor::param(&[2], vec![0.1, -0.2]).unwrap();
        let rm = Tensor::from_vec(&[2], vec![0.3, -0.1]).unwrap();
        let rv = Tensor::from_vec(&[2], vec![1.5, 0.7]).unwrap();
        let loss_fn = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let (y, _) = batch_norm(x, g, b, &rm, &rv, mode, 0.0).unwrap();
            y.mul(&y).unwrap().sum_all()
        };
        let loss = loss_fn(&x, &g, &b);
        loss.backward().unwrap();
        for (name, t) in [("x", &x), ("gamma", &g), ("beta", &b)] {
            let fd = finite_diff_grad(t, H, || loss_fn(&x, &g, &b).item());
            let err = grad_rel_err(&t.grad().unwrap(), &fd);
            assert!(err < TOL, "{name} gradient error {err} in {mode:?}");
        }
    }
}

#[test]
fn gumbel_softmax_gradient_matches_at_fixed_noise() {
    let theta = Tensor::param(&[4], vec![0.5, -0.3, 1.0, 0.0]).unwrap();
    // Re-seeding per evaluation fixes the noise draw, making the map
    // deterministic in theta.
    let eval = |theta: &Tensor| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w = gumbel_softmax(theta, 1.3, &mut rng).unwrap();
        w.weighted_sum_const(&[1.0, 2.0, -1.0, 0.5]).unwrap()
    };
    let loss = eval(&theta);
    loss.backward().unwrap();
    let fd = finite_diff_grad(&theta, H, || eval(&theta).item());
    let err = grad_rel_err(&theta.grad().unwrap(), &fd);
    assert!(err < TOL, "gumbel gradient error {err}");
}

#[test]
fn bn_loss_image_gradient_matches() {
    let g = {
        let mut b = GraphBuilder::new();
        let conv = b.add(
            "conv",
            vec![Port::Input],
            LayerKind::Conv(ConvSpec {
                weight: Tensor::param(&[2, 1, 3, 3], {
                    let mut rng = ChaCha8Rng::seed_from_u64(3);
                    Tensor::randn(&[2, 1, 3, 3], &mut rng).to_vec()
                })
                .unwrap(),
                bias: None,
                stride: (1, 1),
                padding: (1, 1),
                groups: 1,
            }),
        );
        let bn = b.add(
            "bn",
            vec![Port::Layer(conv)],
            LayerKind::BatchNorm(BnSpec {
                gamma: Tensor::param(&[2], vec![1.0; 2]).unwrap(),
                beta: Tensor::param(&[2], vec![0.0; 2]).unwrap(),
                running_mean: Tensor::from_vec(&[2], vec![0.2, -0.4]).unwrap(),
                running_var: Tensor::from_vec(&[2], vec![1.1, 0.6]).unwrap(),
                momentum: 0.1,
            }),
        );
        b.finish([1, 4, 4], 2, bn).unwrap()
    };
    let targets = extract_bn_targets(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Tensor::param(&[3, 1, 4, 4], Tensor::randn(&[3, 1, 4, 4], &mut rng).to_vec()).unwrap();
    let loss = bn_loss(&images, &g, &targets, 1.5, true).unwrap();
    loss.backward().unwrap();
    let fd = finite_diff_grad(&images, H, || {
        bn_loss(&images, &g, &targets, 1.5, true).unwrap().item()
    });
    let err = grad_rel_err(&images.grad().unwrap(), &fd);
    assert!(err < TOL, "bn_loss gradient error {err}");
}

#[test]
fn nas_loss_gradients_match() {
    let l_ce = Tensor::param(&[1], vec![1.7]).unwrap();
    let cost = Tensor::param(&[1], vec![850.0]).unwrap();
    let loss_fn = |l: &Tensor, c: &Tensor| nas_loss(l, c, 2000.0, 6.0).unwrap();
    let loss = loss_fn(&l_ce, &cost);
    loss.backward().unwrap();
    for (name, t) in [("l_ce", &l_ce), ("cost", &cost)] {
        let fd = finite_diff_grad(t, H, || loss_fn(&l_ce, &cost).item());
        let err = grad_rel_err(&t.grad().unwrap(), &fd);
        assert!(err < TOL, "{name} gradient error {err}");
    }
}

#[test]
fn kd_loss_gradient_matches_through_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let student = Tensor::param(&[4, 5], Tensor::randn(&[4, 5], &mut rng).to_vec()).unwrap();
    let teacher_logits = Tensor::randn(&[4, 5], &mut rng);
    let t_kd = 6.0f32;
    let labels = vec![0usize, 2, 4, 1];
    let mut probs = Vec::new();
    for row in teacher_logits.to_vec().chunks(5) {
        let soft: Vec<f32> = row.iter().map(|v| v / t_kd).collect();
        probs.extend(softmax_slice(&soft));
    }
    let loss_fn = |z: &Tensor| {
        let kl = z.kl_from_teacher_mean(&probs, t_kd).unwrap();
        let ce = z.cross_entropy_mean(&labels).unwrap();
        kl.scale(0.95 * t_kd * t_kd).add(&ce.scale(0.05)).unwrap()
    };
    let loss = loss_fn(&student);
    loss.backward().unwrap();
    let fd = finite_diff_grad(&student, H, || loss_fn(&student).item());
    let err = grad_rel_err(&student.grad().unwrap(), &fd);
    assert!(err < TOL, "kd_loss gradient error {err}");
}

#[test]
fn desk_model_end_to_end_gradient_matches() {
    // Cross-entropy through the whole graph, checked on one conv weight.
    let g = build_desk_model(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let batch = Tensor::randn(&[2, 3, 16, 16], &mut rng);
    let labels = vec![3usize, 7];
    let params = g.trainable_params();
    let probe = params[2].clone(); // conv2 weight
    let loss_fn = || {
        let mut opts = lrnas_core::graph::ForwardOptions::default();
        let out = g.forward(&batch, &mut opts).unwrap();
        out.logits.cross_entropy_mean(&labels).unwrap()
    };
    let loss = loss_fn();
    loss.backward().unwrap();
    let analytic = probe.grad().unwrap();
    // Full finite differences over 2304 weights is slow; probe a slice.
    let base = probe.to_vec();
    let mut fd = vec![0.0f32; 24];
    for (slot, i) in (0..base.len()).step_by(base.len() / 24).take(24).enumerate() {
        let mut plus = base.clone();
        plus[i] += H;
        probe.set_data(&plus);
        let fp = loss_fn().item() as f64;
        let mut minus = base.clone();
        minus[i] -= H;
        probe.set_data(&minus);
        let fm = loss_fn().item() as f64;
        fd[slot] = ((fp - fm) / (2.0 * H as f64)) as f32;
    }
    probe.set_data(&base);
    let probed: Vec<f32> = (0..base.len())
        .step_by(base.len() / 24)
        .take(24)
        .map(|i| analytic[i])
        .collect();
    let err = grad_rel_err(&probed, &fd);
    assert!(err < 5e-3, "end-to-end gradient error {err}");
}
