//! Layer DAG representation of a convolutional network.
//!
//! Layers sit in topological order with explicit input ports; forward
//! evaluation walks the order once, optionally capturing per-layer outputs
//! (for distillation) and batch-norm inputs (for the synthetic-data loss).
//! Convolution layers designated as compression targets can be swapped for
//! low-rank building blocks or search-time super blocks; substitution is
//! copy-on-write, the source graph is never modified.

mod block;
mod desk;

pub use block::{BuildingBlock, LowRankBranch, SuperBlock, SuperCandidate};
pub use desk::{build_desk_model, DESK_CLASSES, DESK_INPUT_SHAPE};

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::{
    avg_pool2d, batch_norm, conv2d, global_avg_pool, max_pool2d, BatchStats, BnMode, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId(pub u32);

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Port {
    Input,
    Layer(LayerId),
}

#[derive(Clone)]
pub struct ConvSpec {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }
    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
    pub fn deep_clone(&self) -> ConvSpec {
        ConvSpec {
            weight: clone_param(&self.weight),
            bias: self.bias.as_ref().map(clone_param),
            ..*self
        }
    }
}

#[derive(Clone)]
pub struct BnSpec {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
}

impl BnSpec {
    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
    fn deep_clone(&self) -> BnSpec {
        BnSpec {
            gamma: clone_param(&self.gamma),
            beta: clone_param(&self.beta),
            running_mean: clone_buffer(&self.running_mean),
            running_var: clone_buffer(&self.running_var),
            momentum: self.momentum,
        }
    }
}

#[derive(Clone)]
pub struct DenseSpec {
    /// (in, out) so logits = x . weight + bias.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseSpec {
    fn deep_clone(&self) -> DenseSpec {
        DenseSpec {
            weight: clone_param(&self.weight),
            bias: clone_param(&self.bias),
        }
    }
}

pub(crate) fn clone_param(t: &Tensor) -> Tensor {
    Tensor::param(t.shape(), t.to_vec()).expect("shape/data agree")
}

pub(crate) fn clone_buffer(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.shape(), t.to_vec()).expect("shape/data agree")
}

#[derive(Clone)]
pub enum LayerKind {
    Conv(ConvSpec),
    BatchNorm(BnSpec),
    Relu,
    MaxPool { kernel: (usize, usize), stride: (usize, usize) },
    AvgPool { kernel: (usize, usize), stride: (usize, usize) },
    GlobalAvgPool,
    Flatten,
    Dense(DenseSpec),
    /// Elementwise sum of two inputs.
    Add,
    Block(BuildingBlock),
    Super(SuperBlock),
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense(_) => "dense",
            LayerKind::Add => "add",
            LayerKind::Block(_) => "block",
            LayerKind::Super(_) => "super",
        }
    }

    /// Layers whose outputs are captured for distillation.
    pub fn is_conv_like(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Block(_) | LayerKind::Super(_))
    }
}

#[derive(Clone)]
pub struct Layer {
    pub id: LayerId,
    pub name: String,
    pub inputs: Vec<Port>,
    pub kind: LayerKind,
}

#[derive(Clone)]
pub struct NetworkGraph {
    layers: Vec<Layer>,
    output: LayerId,
    input_shape: [usize; 3],
    classes: usize,
    targets: Vec<LayerId>,
    /// Output shape (without batch dim) per layer, from shape inference.
    shapes: BTreeMap<LayerId, Vec<usize>>,
    /// Original (flops, params) recorded when a conv was designated a target.
    original_costs: BTreeMap<LayerId, (u64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub enum SupernetSample<'a> {
    /// Gumbel-Softmax weights over every candidate.
    WeightAll,
    /// Two distinct candidates sampled by softmax(theta), weights renormalized.
    SamplePair,
    /// Deterministic candidate choice per super layer.
    Select(&'a BTreeMap<LayerId, usize>),
}

pub struct SupernetCtx<'a> {
    pub sample: SupernetSample<'a>,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub train: bool,
    pub capture_conv: bool,
    pub capture_bn_inputs: bool,
    /// Overrides every BN layer's momentum when set (0.0 freezes running stats).
    pub bn_momentum: Option<f32>,
    pub supernet: Option<SupernetCtx<'a>>,
}

/// Sampled mixture of a super block during one forward pass.
pub struct SampledMix {
    pub indices: Vec<usize>,
    /// Mixture weights, differentiable back to theta.
    pub weights: Tensor,
}

pub struct ForwardResult {
    pub logits: Tensor,
    pub conv_outputs: BTreeMap<LayerId, Tensor>,
    pub bn_inputs: BTreeMap<LayerId, Tensor>,
    pub bn_stats: BTreeMap<LayerId, BatchStats>,
    pub sampled: BTreeMap<LayerId, SampledMix>,
}

/// What a target layer may be substituted with.
pub enum Replacement {
    Conv(ConvSpec),
    Block(BuildingBlock),
    Super(SuperBlock),
}

pub struct GraphBuilder {
    layers: Vec<Layer>,
    next: u32,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder { layers: Vec::new(), next: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, inputs: Vec<Port>, kind: LayerKind) -> LayerId {
        let id = LayerId(self.next);
        self.next += 1;
        self.layers.push(Layer { id, name: name.into(), inputs, kind });
        id
    }

    pub fn finish(self, input_shape: [usize; 3], classes: usize, output: LayerId) -> Result<NetworkGraph> {
        let mut graph = NetworkGraph {
            layers: self.layers,
            output,
            input_shape,
            classes,
            targets: Vec::new(),
            shapes: BTreeMap::new(),
            original_costs: BTreeMap::new(),
        };
        graph.shapes = graph.infer_shapes()?;
        Ok(graph)
    }
}

impl NetworkGraph {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> Result<&Layer> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::Contract(format!("no layer with id {id}")))
    }

    pub fn output_layer(&self) -> LayerId {
        self.output
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn targets(&self) -> &[LayerId] {
        &self.targets
    }

    /// Output shape (without batch dim) of a layer.
    pub fn out_shape(&self, id: LayerId) -> Result<&[usize]> {
        self.shapes
            .get(&id)
            .map(|s| s.as_slice())
            .ok_or_else(|| Error::Contract(format!("no shape for layer {id}")))
    }

    /// Input shape (without batch dim) feeding a layer's first port.
    pub fn in_shape(&self, id: LayerId) -> Result<Vec<usize>> {
        let layer = self.layer(id)?;
        match layer.inputs.first() {
            Some(Port::Input) | None => Ok(self.input_shape.to_vec()),
            Some(Port::Layer(src)) => Ok(self.out_shape(*src)?.to_vec()),
        }
    }

    pub fn original_cost(&self, id: LayerId) -> Option<(u64, u64)> {
        self.original_costs.get(&id).copied()
    }

    /// Mark layers as compression targets, recording the cost of the original
    /// convolution each stands for. Accepts convs (fresh graphs) and blocks
    /// (already-substituted graphs).
    pub fn designate_targets(&mut self, ids: &[LayerId]) -> Result<()> {
        for &id in ids {
            let layer = self.layer(id)?;
            let (f, c, kernel, bias) = match &layer.kind {
                LayerKind::Conv(spec) => {
                    if spec.groups != 1 {
                        return Err(Error::Contract(format!(
                            "target layer {id} ({}) must be an ungrouped convolution",
                            layer.name
                        )));
                    }
                    (spec.filters(), spec.in_channels(), spec.kernel(), spec.bias.is_some())
                }
                LayerKind::Block(b) => (
                    b.out_channels,
                    b.in_channels,
                    b.orig_kernel,
                    b.branches[0].bias.is_some(),
                ),
                _ => {
                    return Err(Error::Contract(format!(
                        "layer {id} ({}) cannot be a compression target",
                        layer.name
                    )))
                }
            };
            let out = self.out_shape(id)?;
            let report =
                crate::cost::conv_cost(f, c, kernel.0, kernel.1, 1, out[1], out[2], bias)?;
            self.original_costs.insert(id, (report.flops, report.params));
        }
        self.targets = ids.to_vec();
        Ok(())
    }

    /// Update the Gumbel-Softmax temperature of every super block.
    pub fn set_super_temperature(&mut self, temperature: f32) {
        for layer in &mut self.layers {
            if let LayerKind::Super(sb) = &mut layer.kind {
                sb.temperature = temperature;
            }
        }
    }

    fn infer_shapes(&self) -> Result<BTreeMap<LayerId, Vec<usize>>> {
        let mut shapes: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
        let mut seen: BTreeSet<LayerId> = BTreeSet::new();
        let input_shape = self.input_shape.to_vec();
        for layer in &self.layers {
            let mut ins: Vec<Vec<usize>> = Vec::new();
            for port in &layer.inputs {
                match port {
                    Port::Input => ins.push(input_shape.clone()),
                    Port::Layer(src) => {
                        if !seen.contains(src) {
                            return Err(Error::Contract(format!(
                                "layer {} ({}) references layer {src} that is not earlier in topological order",
                                layer.id, layer.name
                            )));
                        }
                        ins.push(shapes[src].clone());
                    }
                }
            }
            let out = self.layer_out_shape(layer, &ins)?;
            shapes.insert(layer.id, out);
            seen.insert(layer.id);
        }
        if !seen.contains(&self.output) {
            return Err(Error::Contract(format!("output layer {} missing", self.output)));
        }
        Ok(shapes)
    }

    fn layer_out_shape(&self, layer: &Layer, ins: &[Vec<usize>]) -> Result<Vec<usize>> {
        let edge_err = |msg: String| {
            Error::Dimension(format!("at layer {} ({}): {msg}", layer.id, layer.name))
        };
        let one = |ins: &[Vec<usize>]| -> Result<Vec<usize>> {
            if ins.len() != 1 {
                return Err(edge_err(format!("expected 1 input, got {}", ins.len())));
            }
            Ok(ins[0].clone())
        };
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
            if s.len() != 3 {
                return Err(edge_err(format!("expected CHW input, got {s:?}")));
            }
            Ok((s[0], s[1], s[2]))
        };
        let conv_extent = |inp: usize, pad: usize, k: usize, stride: usize| -> Result<usize> {
            let padded = inp + 2 * pad;
            if padded < k {
                return Err(edge_err(format!("kernel {k} exceeds padded extent {padded}")));
            }
            Ok((padded - k) / stride + 1)
        };
        match &layer.kind {
            LayerKind::Conv(spec) => {
                let (c, h, w) = spatial(&one(ins)?)?;
                if c != spec.in_channels() {
                    return Err(edge_err(format!(
                        "conv expects {} input channels, got {c}",
                        spec.in_channels()
                    )));
                }
                let (kh, kw) = spec.kernel();
                Ok(vec![
                    spec.filters(),
                    conv_extent(h, spec.padding.0, kh, spec.stride.0)?,
                    conv_extent(w, spec.padding.1, kw, spec.stride.1)?,
                ])
            }
            LayerKind::Block(block) => {
                let (c, h, w) = spatial(&one(ins)?)?;
                if c != block.in_channels {
                    return Err(edge_err(format!(
                        "block expects {} input channels, got {c}",
                        block.in_channels
                    )));
                }
                let (kh, kw) = block.orig_kernel;
                Ok(vec![
                    block.out_channels,
                    conv_extent(h, block.orig_padding.0, kh, block.orig_stride.0)?,
                    conv_extent(w, block.orig_padding.1, kw, block.orig_stride.1)?,
                ])
            }
            LayerKind::Super(sb) => {
                let (c, h, w) = spatial(&one(ins)?)?;
                let (in_ch, out_ch, kernel, stride, padding) = sb.io_contract();
                if c != in_ch {
                    return Err(edge_err(format!("super block expects {in_ch} input channels, got {c}")));
                }
                Ok(vec![
                    out_ch,
                    conv_extent(h, padding.0, kernel.0, stride.0)?,
                    conv_extent(w, padding.1, kernel.1, stride.1)?,
                ])
            }
            LayerKind::BatchNorm(spec) => {
                let s = one(ins)?;
                let (c, _, _) = spatial(&s)?;
                if c != spec.channels() {
                    return Err(edge_err(format!(
                        "batchnorm expects {} channels, got {c}",
                        spec.channels()
                    )));
                }
                Ok(s)
            }
            LayerKind::Relu => one(ins),
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let (c, h, w) = spatial(&one(ins)?)?;
                Ok(vec![
                    c,
                    conv_extent(h, 0, kernel.0, stride.0)?,
                    conv_extent(w, 0, kernel.1, stride.1)?,
                ])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial(&one(ins)?)?;
                Ok(vec![c])
            }
            LayerKind::Flatten => {
                let s = one(ins)?;
                Ok(vec![s.iter().product()])
            }
            LayerKind::Dense(spec) => {
                let s = one(ins)?;
                let flat: usize = s.iter().product();
                if s.len() != 1 || flat != spec.weight.shape()[0] {
                    return Err(edge_err(format!(
                        "dense expects flat input of {}, got {s:?}",
                        spec.weight.shape()[0]
                    )));
                }
                Ok(vec![spec.weight.shape()[1]])
            }
            LayerKind::Add => {
                if ins.len() != 2 || ins[0] != ins[1] {
                    return Err(edge_err(format!("add expects two equal shapes, got {ins:?}")));
                }
                Ok(ins[0].clone())
            }
        }
    }

    /// Forward a batch through the graph.
    pub fn forward(&self, batch: &Tensor, opts: &mut ForwardOptions) -> Result<ForwardResult> {
        let bshape = batch.shape();
        if bshape.len() != 4
            || bshape[1] != self.input_shape[0]
            || bshape[2] != self.input_shape[1]
            || bshape[3] != self.input_shape[2]
        {
            return Err(Error::Dimension(format!(
                "batch shape {bshape:?} does not match input contract {:?}",
                self.input_shape
            )));
        }
        let mode = if opts.train { BnMode::Train } else { BnMode::Eval };
        let mut outs: BTreeMap<LayerId, Tensor> = BTreeMap::new();
        let mut result = ForwardResult {
            logits: Tensor::scalar(0.0),
            conv_outputs: BTreeMap::new(),
            bn_inputs: BTreeMap::new(),
            bn_stats: BTreeMap::new(),
            sampled: BTreeMap::new(),
        };

        for layer in &self.layers {
            let mut ins: Vec<Tensor> = Vec::with_capacity(layer.inputs.len());
            for port in &layer.inputs {
                match port {
                    Port::Input => ins.push(batch.clone()),
                    Port::Layer(src) => ins.push(
                        outs.get(src)
                            .cloned()
                            .ok_or_else(|| Error::Contract(format!("missing input {src} for layer {}", layer.id)))?,
                    ),
                }
            }
            let wrap = |e: Error| match e {
                Error::Dimension(msg) => {
                    Error::Dimension(format!("at layer {} ({}): {msg}", layer.id, layer.name))
                }
                other => other,
            };
            let out = match &layer.kind {
                LayerKind::Conv(spec) => conv2d(
                    &ins[0],
                    &spec.weight,
                    spec.bias.as_ref(),
                    spec.stride,
                    spec.padding,
                    spec.groups,
                )
                .map_err(wrap)?,
                LayerKind::BatchNorm(spec) => {
                    if opts.capture_bn_inputs {
                        result.bn_inputs.insert(layer.id, ins[0].clone());
                    }
                    let momentum = opts.bn_momentum.unwrap_or(spec.momentum);
                    let (out, stats) = batch_norm(
                        &ins[0],
                        &spec.gamma,
                        &spec.beta,
                        &spec.running_mean,
                        &spec.running_var,
                        mode,
                        momentum,
                    )
                    .map_err(wrap)?;
                    result.bn_stats.insert(layer.id, stats);
                    out
                }
                LayerKind::Relu => ins[0].relu(),
                LayerKind::MaxPool { kernel, stride } => {
                    max_pool2d(&ins[0], *kernel, *stride).map_err(wrap)?
                }
                LayerKind::AvgPool { kernel, stride } => {
                    avg_pool2d(&ins[0], *kernel, *stride).map_err(wrap)?
                }
                LayerKind::GlobalAvgPool => global_avg_pool(&ins[0]).map_err(wrap)?,
                LayerKind::Flatten => {
                    let n = ins[0].shape()[0];
                    let flat = ins[0].numel() / n;
                    ins[0].reshape(&[n, flat]).map_err(wrap)?
                }
                LayerKind::Dense(spec) => ins[0]
                    .matmul(&spec.weight)
                    .and_then(|y| y.add_bias(&spec.bias))
                    .map_err(wrap)?,
                LayerKind::Add => ins[0].add(&ins[1]).map_err(wrap)?,
                LayerKind::Block(block) => block.forward(&ins[0]).map_err(wrap)?,
                LayerKind::Super(sb) => {
                    let ctx = opts.supernet.as_mut().ok_or_else(|| {
                        Error::Contract(format!(
                            "layer {} is a super block but no supernet context was provided",
                            layer.id
                        ))
                    })?;
                    let (out, mix) = sb.forward_mixed(&ins[0], layer.id, ctx).map_err(wrap)?;
                    if let Some(mix) = mix {
                        result.sampled.insert(layer.id, mix);
                    }
                    out
                }
            };
            if opts.capture_conv && layer.kind.is_conv_like() {
                result.conv_outputs.insert(layer.id, out.clone());
            }
            outs.insert(layer.id, out);
        }
        result.logits = outs
            .remove(&self.output)
            .ok_or_else(|| Error::Contract("output layer produced no tensor".into()))?;
        Ok(result)
    }

    /// Plain eval-mode logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, &mut ForwardOptions::default())?.logits)
    }

    /// Replace a compression target, returning a new graph. The receiver is
    /// left untouched; unchanged layers share weight storage.
    pub fn substitute(&self, id: LayerId, replacement: Replacement) -> Result<NetworkGraph> {
        if !self.targets.contains(&id) {
            return Err(Error::Contract(format!("layer {id} is not a compression target")));
        }
        let old = self.layer(id)?;
        let old_shape = self.out_shape(id)?.to_vec();
        let kind = match replacement {
            Replacement::Conv(spec) => LayerKind::Conv(spec),
            Replacement::Block(b) => LayerKind::Block(b),
            Replacement::Super(sb) => LayerKind::Super(sb),
        };
        let mut graph = self.clone();
        let slot = graph
            .layers
            .iter_mut()
            .find(|l| l.id == id)
            .expect("id checked above");
        slot.kind = kind;
        let _ = old;
        let shapes = graph.infer_shapes().map_err(|e| {
            Error::Contract(format!("replacement for layer {id} breaks the io contract: {e}"))
        })?;
        if shapes[&id] != old_shape {
            return Err(Error::Contract(format!(
                "replacement for layer {id} changes output shape {:?} -> {:?}",
                old_shape, shapes[&id]
            )));
        }
        graph.shapes = shapes;
        Ok(graph)
    }

    /// All trainable parameter tensors (weights, biases, BN affine).
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Conv(spec) => {
                    out.push(spec.weight.clone());
                    if let Some(b) = &spec.bias {
                        out.push(b.clone());
                    }
                }
                LayerKind::BatchNorm(spec) => {
                    out.push(spec.gamma.clone());
                    out.push(spec.beta.clone());
                }
                LayerKind::Dense(spec) => {
                    out.push(spec.weight.clone());
                    out.push(spec.bias.clone());
                }
                LayerKind::Block(block) => out.extend(block.params()),
                LayerKind::Super(_) => {}
                _ => {}
            }
        }
        out
    }

    /// Every tensor owned by the graph (trainables plus BN running buffers),
    /// in a stable order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let base = format!("{}#{}", layer.name, layer.id);
            match &layer.kind {
                LayerKind::Conv(spec) => {
                    out.push((format!("{base}.weight"), spec.weight.clone()));
                    if let Some(b) = &spec.bias {
                        out.push((format!("{base}.bias"), b.clone()));
                    }
                }
                LayerKind::BatchNorm(spec) => {
                    out.push((format!("{base}.gamma"), spec.gamma.clone()));
                    out.push((format!("{base}.beta"), spec.beta.clone()));
                    out.push((format!("{base}.running_mean"), spec.running_mean.clone()));
                    out.push((format!("{base}.running_var"), spec.running_var.clone()));
                }
                LayerKind::Dense(spec) => {
                    out.push((format!("{base}.weight"), spec.weight.clone()));
                    out.push((format!("{base}.bias"), spec.bias.clone()));
                }
                LayerKind::Block(block) => {
                    for (i, br) in block.branches.iter().enumerate() {
                        out.push((format!("{base}.b{i}.w0"), br.w0.clone()));
                        out.push((format!("{base}.b{i}.w1"), br.w1.clone()));
                        if let Some(b) = &br.bias {
                            out.push((format!("{base}.b{i}.bias"), b.clone()));
                        }
                    }
                }
                LayerKind::Super(_) => {}
                _ => {}
            }
        }
        out
    }

    /// Independent copy: fresh parameter and buffer tensors throughout.
    pub fn deep_clone(&self) -> NetworkGraph {
        let mut graph = self.clone();
        for layer in &mut graph.layers {
            match &mut layer.kind {
                LayerKind::Conv(spec) => *spec = spec.deep_clone(),
                LayerKind::BatchNorm(spec) => *spec = spec.deep_clone(),
                LayerKind::Dense(spec) => *spec = spec.deep_clone(),
                LayerKind::Block(block) => *block = block.deep_clone(),
                LayerKind::Super(_) => {}
                _ => {}
            }
        }
        graph
    }
}

/// Top-1 and top-5 accuracy over labeled batches.
pub fn evaluate(graph: &NetworkGraph, batches: &[(Tensor, Vec<usize>)]) -> Result<(f64, f64)> {
    if batches.is_empty() || batches.iter().all(|(_, l)| l.is_empty()) {
        return Err(Error::Contract("evaluate requires a non-empty dataset".into()));
    }
    let classes = graph.classes();
    let k = classes.min(5);
    let mut total = 0usize;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (batch, labels) in batches {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let logits = graph.logits(batch)?;
        let data = logits.to_vec();
        let c = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            // Argmax with lowest-index tie break.
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                top1 += 1;
            }
            // Rank of the label: count entries strictly greater, plus earlier ties.
            let mut rank = 0usize;
            for j in 0..c {
                if row[j] > row[label] || (row[j] == row[label] && j < label) {
                    rank += 1;
                }
            }
            if rank < k {
                top5 += 1;
            }
            total += 1;
        }
    }
    Ok((top1 as f64 / total as f64, top5 as f64 / total as f64))
}

#[derive(Debug, Clone)]
pub struct PretrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epoch indices at which the learning rate is multiplied by 0.1.
    pub lr_decay_at: Vec<usize>,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            epochs: 12,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_at: vec![8, 11],
            seed: 0,
        }
    }
}

/// Train the graph with cross-entropy SGD until the schedule ends. Populates
/// BN running statistics as a side effect of train-mode forwards.
pub fn pretrain(
    graph: NetworkGraph,
    images: &[f32],
    labels: &[usize],
    schedule: &PretrainSchedule,
) -> Result<(NetworkGraph, Vec<f64>)> {
    let graph = graph.deep_clone();
    let [c, h, w] = graph.input_shape();
    let pix = c * h * w;
    let n = labels.len();
    if images.len() != n * pix {
        return Err(Error::Dimension(format!(
            "pretrain: {} pixels for {n} labels of {pix} each",
            images.len()
        )));
    }
    let params = graph.trainable_params();
    let mut opt = Sgd::new(schedule.lr, schedule.momentum, schedule.weight_decay);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(schedule.seed);
    let mut history = Vec::new();

    for epoch in 0..schedule.epochs {
        if schedule.lr_decay_at.contains(&epoch) {
            opt.lr *= 0.1;
        }
        // Fisher-Yates shuffle of sample order.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * pix);
            let mut lab = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&images[i * pix..(i + 1) * pix]);
                lab.push(labels[i]);
            }
            let batch = Tensor::from_vec(&[chunk.len(), c, h, w], data)?;
            let mut opts = ForwardOptions {
                train: true,
                ..Default::default()
            };
            let out = graph.forward(&batch, &mut opts)?;
            let loss = out.logits.cross_entropy_mean(&lab)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("loss diverged to {lv}"),
                });
            }
            epoch_loss += lv;
            batches += 1;
            for p in &params {
                p.zero_grad();
            }
            loss.backward()?;
            opt.step(&params);
        }
        history.push(epoch_loss / batches.max(1) as f64);
    }
    for p in &params {
        p.zero_grad();
    }
    Ok((graph, history))
}
