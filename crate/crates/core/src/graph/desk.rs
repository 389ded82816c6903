//! The desk-scale reference model: six 3x3 convolutions with BN+ReLU, two
//! residual adds, channels 16 -> 32 -> 64 on 3x16x16 inputs, global average
//! pool and a 10-way head. Every 3x3 conv except the first is a compression
//! target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BnSpec, ConvSpec, DenseSpec, GraphBuilder, LayerKind, NetworkGraph, Port};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DESK_INPUT_SHAPE: [usize; 3] = [3, 16, 16];
pub const DESK_CLASSES: usize = 10;

fn he_conv(f: usize, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (c * k * k) as f32).sqrt();
    let t = Tensor::randn(&[f, c, k, k], rng);
    let data: Vec<f32> = t.to_vec().iter().map(|v| v * std).collect();
    Tensor::param(&[f, c, k, k], data).expect("shape agrees")
}

fn bn_spec(c: usize) -> BnSpec {
    BnSpec {
        gamma: Tensor::param(&[c], vec![1.0; c]).unwrap(),
        beta: Tensor::param(&[c], vec![0.0; c]).unwrap(),
        running_mean: Tensor::from_vec(&[c], vec![0.0; c]).unwrap(),
        running_var: Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
        momentum: 0.1,
    }
}

fn conv_spec(f: usize, c: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvSpec {
    ConvSpec {
        weight: he_conv(f, c, 3, rng),
        bias: None,
        stride: (stride, stride),
        padding: (1, 1),
        groups: 1,
    }
}

/// Build the reference model with seeded initialization.
pub fn build_desk_model(seed: u64) -> Result<NetworkGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();

    let conv1 = b.add("conv1", vec![Port::Input], LayerKind::Conv(conv_spec(16, 3, 1, &mut rng)));
    let bn1 = b.add("bn1", vec![Port::Layer(conv1)], LayerKind::BatchNorm(bn_spec(16)));
    let relu1 = b.add("relu1", vec![Port::Layer(bn1)], LayerKind::Relu);

    let conv2 = b.add("conv2", vec![Port::Layer(relu1)], LayerKind::Conv(conv_spec(16, 16, 1, &mut rng)));
    let bn2 = b.add("bn2", vec![Port::Layer(conv2)], LayerKind::BatchNorm(bn_spec(16)));
    let relu2 = b.add("relu2", vec![Port::Layer(bn2)], LayerKind::Relu);

    let conv3 = b.add("conv3", vec![Port::Layer(relu2)], LayerKind::Conv(conv_spec(16, 16, 1, &mut rng)));
    let bn3 = b.add("bn3", vec![Port::Layer(conv3)], LayerKind::BatchNorm(bn_spec(16)));
    let add1 = b.add("add1", vec![Port::Layer(bn3), Port::Layer(relu1)], LayerKind::Add);
    let relu3 = b.add("relu3", vec![Port::Layer(add1)], LayerKind::Relu);

    let conv4 = b.add("conv4", vec![Port::Layer(relu3)], LayerKind::Conv(conv_spec(32, 16, 2, &mut rng)));
    let bn4 = b.add("bn4", vec![Port::Layer(conv4)], LayerKind::BatchNorm(bn_spec(32)));
    let relu4 = b.add("relu4", vec![Port::Layer(bn4)], LayerKind::Relu);

    let conv5 = b.add("conv5", vec![Port::Layer(relu4)], LayerKind::Conv(conv_spec(32, 32, 1, &mut rng)));
    let bn5 = b.add("bn5", vec![Port::Layer(conv5)], LayerKind::BatchNorm(bn_spec(32)));
    let add2 = b.add("add2", vec![Port::Layer(bn5), Port::Layer(relu4)], LayerKind::Add);
    let relu5 = b.add("relu5", vec![Port::Layer(add2)], LayerKind::Relu);

    let conv6 = b.add("conv6", vec![Port::Layer(relu5)], LayerKind::Conv(conv_spec(64, 32, 2, &mut rng)));
    let bn6 = b.add("bn6", vec![Port::Layer(conv6)], LayerKind::BatchNorm(bn_spec(64)));
    let relu6 = b.add("relu6", vec![Port::Layer(bn6)], LayerKind::Relu);

    let gap = b.add("gap", vec![Port::Layer(relu6)], LayerKind::GlobalAvgPool);
    let head_std = (2.0 / 64.0f32).sqrt();
    let head_w: Vec<f32> = Tensor::randn(&[64, DESK_CLASSES], &mut rng)
        .to_vec()
        .iter()
        .map(|v| v * head_std)
        .collect();
    let head = b.add(
        "head",
        vec![Port::Layer(gap)],
        LayerKind::Dense(DenseSpec {
            weight: Tensor::param(&[64, DESK_CLASSES], head_w)?,
            bias: Tensor::param(&[DESK_CLASSES], vec![0.0; DESK_CLASSES])?,
        }),
    );

    let mut graph = b.finish(DESK_INPUT_SHAPE, DESK_CLASSES, head)?;
    graph.designate_targets(&[conv2, conv3, conv4, conv5, conv6])?;
    Ok(graph)
}
