//! Elementwise, reduction, matrix and loss operations with their backward
//! rules. Convolution, pooling and batch norm live in `conv`/`bn`.

use super::{bn, conv, Tensor};
use crate::error::{Error, Result};

/// Saved context for batch norm backward.
#[derive(Clone)]
pub struct BnBackCtx {
    pub(crate) eps: f32,
    pub(crate) train: bool,
    /// Statistics used to normalize (batch stats in train mode, running in eval).
    pub(crate) mean: Vec<f32>,
    pub(crate) var: Vec<f32>,
}

pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddConst(f32),
    Ln,
    Sqrt,
    PowConst(f32),
    Relu,
    /// `[x, bias]` where bias has length `shape[1]` (or `shape[0]` for rank-1 x... not supported; rank >= 2).
    AddBias,
    /// `[x, s]` with scalar `s`: every element of x times s.
    ScaleByScalar,
    /// Extract one element of a rank-1 tensor as a scalar.
    IndexScalar(usize),
    /// Stack k scalar parents into a `[k]` vector.
    StackScalars,
    /// Dot product of a rank-1 parent with a constant vector, yielding a scalar.
    WeightedSumConst(Vec<f32>),
    SumAll,
    MeanAll,
    /// NCHW -> [C] mean over batch and spatial dims.
    ChannelMean,
    /// NCHW -> [C] mean of squares over batch and spatial dims.
    ChannelSqMean,
    /// `[a, b]`: a is (m, k), b is (k, n).
    Matmul,
    Reshape,
    /// Softmax over a rank-1 tensor.
    SoftmaxVec,
    /// Mean cross-entropy of logits (N, C) against integer labels.
    CrossEntropyMean { labels: Vec<usize> },
    /// Batch-mean KL(teacher || student) with temperature-softened softmax,
    /// teacher probabilities fixed.
    KlTeacherStudentMean { teacher_probs: Vec<f32>, temperature: f32 },
    /// `[a, b]`: sum of squared differences.
    SqDiffSum,
    /// `[a, b]`: mean of squared differences.
    SqDiffMean,
    Conv2d { stride: (usize, usize), padding: (usize, usize), groups: usize },
    BatchNorm(BnBackCtx),
    MaxPool { kernel: (usize, usize), stride: (usize, usize), indices: Vec<usize> },
    AvgPool { kernel: (usize, usize), stride: (usize, usize) },
    GlobalAvgPool,
}

impl OpKind {
    /// Per-parent gradients for `out_grad`. `None` entries mean "no gradient"
    /// (constant or integer-like parents).
    pub(crate) fn backward(
        &self,
        out_grad: &[f32],
        out_shape: &[usize],
        parents: &[Tensor],
    ) -> Result<Vec<Option<Vec<f32>>>> {
        let g = out_grad;
        Ok(match self {
            OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            OpKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            OpKind::Mul => {
                let a = parents[0].data();
                let b = parents[1].data();
                let ga = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }
            OpKind::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            OpKind::AddConst(_) => vec![Some(g.to_vec())],
            OpKind::Ln => {
                let a = parents[0].data();
                vec![Some(g.iter().zip(a.iter()).map(|(g, a)| g / a).collect())]
            }
            OpKind::Sqrt => {
                let a = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(a.iter())
                        .map(|(g, a)| g * 0.5 / a.max(0.0).sqrt().max(1e-20))
                        .collect(),
                )]
            }
            OpKind::PowConst(p) => {
                let a = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(a.iter())
                        .map(|(g, a)| g * p * a.powf(p - 1.0))
                        .collect(),
                )]
            }
            OpKind::Relu => {
                let a = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(a.iter())
                        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            OpKind::AddBias => {
                let shape = parents[0].shape().to_vec();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product::<usize>().max(1);
                let n = shape[0];
                let mut gb = vec![0.0f32; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        let mut s = 0.0;
                        for k in 0..inner {
                            s += g[base + k];
                        }
                        gb[ci] += s;
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            OpKind::ScaleByScalar => {
                let x = parents[0].data();
                let s = parents[1].data()[0];
                let gx = g.iter().map(|v| v * s).collect();
                let gs: f32 = g.iter().zip(x.iter()).map(|(g, x)| g * x).sum();
                vec![Some(gx), Some(vec![gs])]
            }
            OpKind::IndexScalar(i) => {
                let mut gx = vec![0.0f32; parents[0].numel()];
                gx[*i] = g[0];
                vec![Some(gx)]
            }
            OpKind::StackScalars => parents.iter().enumerate().map(|(i, _)| Some(vec![g[i]])).collect(),
            OpKind::WeightedSumConst(c) => {
                vec![Some(c.iter().map(|ci| ci * g[0]).collect())]
            }
            OpKind::SumAll => vec![Some(vec![g[0]; parents[0].numel()])],
            OpKind::MeanAll => {
                let n = parents[0].numel() as f32;
                vec![Some(vec![g[0] / n; parents[0].numel()])]
            }
            OpKind::ChannelMean => {
                let shape = parents[0].shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let count = (n * h * w) as f32;
                let mut gx = vec![0.0f32; parents[0].numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let gv = g[ci] / count;
                        for k in 0..h * w {
                            gx[base + k] = gv;
                        }
                    }
                }
                vec![Some(gx)]
            }
            OpKind::ChannelSqMean => {
                let x = parents[0].data();
                let shape = parents[0].shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let count = (n * h * w) as f32;
                let mut gx = vec![0.0f32; x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let gv = 2.0 * g[ci] / count;
                        for k in 0..h * w {
                            gx[base + k] = gv * x[base + k];
                        }
                    }
                }
                vec![Some(gx)]
            }
            OpKind::Matmul => {
                let a = parents[0].data();
                let b = parents[1].data();
                let (m, k) = (parents[0].shape()[0], parents[0].shape()[1]);
                let n = parents[1].shape()[1];
                // ga = g . b^T ; gb = a^T . g
                let mut ga = vec![0.0f32; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            ga[i * k + kk] += gv * b[kk * n + j];
                        }
                    }
                }
                let mut gb = vec![0.0f32; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = a[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[kk * n + j] += av * g[i * n + j];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            OpKind::Reshape => vec![Some(g.to_vec())],
            OpKind::SoftmaxVec => {
                let x = parents[0].data();
                let y = softmax_slice(&x);
                let dot: f32 = g.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
                vec![Some(y.iter().zip(g.iter()).map(|(y, g)| y * (g - dot)).collect())]
            }
            OpKind::CrossEntropyMean { labels } => {
                let z = parents[0].data();
                let (n, c) = (parents[0].shape()[0], parents[0].shape()[1]);
                let scale = g[0] / n as f32;
                let mut gz = vec![0.0f32; z.len()];
                for i in 0..n {
                    let row = &z[i * c..(i + 1) * c];
                    let p = softmax_slice(row);
                    for j in 0..c {
                        gz[i * c + j] = scale * (p[j] - if j == labels[i] { 1.0 } else { 0.0 });
                    }
                }
                vec![Some(gz)]
            }
            OpKind::KlTeacherStudentMean { teacher_probs, temperature } => {
                let z = parents[0].data();
                let (n, c) = (parents[0].shape()[0], parents[0].shape()[1]);
                let scale = g[0] / (n as f32 * temperature);
                let mut gz = vec![0.0f32; z.len()];
                for i in 0..n {
                    let row: Vec<f32> = z[i * c..(i + 1) * c].iter().map(|v| v / temperature).collect();
                    let q = softmax_slice(&row);
                    for j in 0..c {
                        gz[i * c + j] = scale * (q[j] - teacher_probs[i * c + j]);
                    }
                }
                vec![Some(gz)]
            }
            OpKind::SqDiffSum => {
                let a = parents[0].data();
                let b = parents[1].data();
                let ga: Vec<f32> = a
                    .iter()
                    .zip(b.iter())
                    .map(|(a, b)| 2.0 * g[0] * (a - b))
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![Some(ga), Some(gb)]
            }
            OpKind::SqDiffMean => {
                let a = parents[0].data();
                let b = parents[1].data();
                let n = a.len() as f32;
                let ga: Vec<f32> = a
                    .iter()
                    .zip(b.iter())
                    .map(|(a, b)| 2.0 * g[0] * (a - b) / n)
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![Some(ga), Some(gb)]
            }
            OpKind::Conv2d { stride, padding, groups } => {
                let gx = conv::conv2d_backward_input(
                    g,
                    out_shape,
                    &parents[0],
                    &parents[1],
                    *stride,
                    *padding,
                    *groups,
                );
                let gw = conv::conv2d_backward_weight(
                    g,
                    out_shape,
                    &parents[0],
                    &parents[1],
                    *stride,
                    *padding,
                    *groups,
                );
                vec![Some(gx), Some(gw)]
            }
            OpKind::BatchNorm(ctx) => bn::batch_norm_backward(g, ctx, parents),
            OpKind::MaxPool { indices, .. } => {
                let mut gx = vec![0.0f32; parents[0].numel()];
                for (gi, &src) in g.iter().zip(indices.iter()) {
                    gx[src] += gi;
                }
                vec![Some(gx)]
            }
            OpKind::AvgPool { kernel, stride } => {
                let shape = parents[0].shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (kh, kw) = *kernel;
                let (sh, sw) = *stride;
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let area = (kh * kw) as f32;
                let mut gx = vec![0.0f32; parents[0].numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let ibase = (ni * c + ci) * h * w;
                        let obase = (ni * c + ci) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[obase + oy * ow + ox] / area;
                                for u in 0..kh {
                                    for v in 0..kw {
                                        gx[ibase + (oy * sh + u) * w + (ox * sw + v)] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }
            OpKind::GlobalAvgPool => {
                let shape = parents[0].shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let area = (h * w) as f32;
                let mut gx = vec![0.0f32; parents[0].numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[ni * c + ci] / area;
                        let base = (ni * c + ci) * h * w;
                        for k in 0..h * w {
                            gx[base + k] = gv;
                        }
                    }
                }
                vec![Some(gx)]
            }
        })
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(x: &[f32]) -> Vec<f32> {
    let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::Add,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::Sub,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::Mul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, OpKind::Scale(c), vec![self.clone()])
    }

    pub fn add_const(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, OpKind::AddConst(c), vec![self.clone()])
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|v| v.ln()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("ln of non-positive value".into()));
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, OpKind::Ln, vec![self.clone()]))
    }

    pub fn sqrt_elem(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0).sqrt()).collect();
        Tensor::from_op(self.shape().to_vec(), data, OpKind::Sqrt, vec![self.clone()])
    }

    pub fn pow_const(&self, p: f32) -> Tensor {
        let data = self.data().iter().map(|v| v.powf(p)).collect();
        Tensor::from_op(self.shape().to_vec(), data, OpKind::PowConst(p), vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), data, OpKind::Relu, vec![self.clone()])
    }

    /// Add a per-channel bias along dim 1 of a rank>=2 tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape().len() < 2 || bias.shape() != [self.shape()[1]] {
            return Err(Error::Dimension(format!(
                "add_bias: x {:?} with bias {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product::<usize>().max(1);
        let b = bias.to_vec();
        let mut data = self.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for k in 0..inner {
                    data[base + k] += b[ci];
                }
            }
        }
        Ok(Tensor::from_op(shape, data, OpKind::AddBias, vec![self.clone(), bias.clone()]))
    }

    /// Multiply every element by a scalar tensor (differentiable in both).
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Dimension("scale_by expects a scalar".into()));
        }
        let sv = s.item();
        let data = self.data().iter().map(|v| v * sv).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            OpKind::ScaleByScalar,
            vec![self.clone(), s.clone()],
        ))
    }

    pub fn index_scalar(&self, i: usize) -> Result<Tensor> {
        if self.shape().len() != 1 || i >= self.numel() {
            return Err(Error::Dimension(format!(
                "index_scalar {i} out of bounds for {:?}",
                self.shape()
            )));
        }
        let v = self.data()[i];
        Ok(Tensor::from_op(vec![1], vec![v], OpKind::IndexScalar(i), vec![self.clone()]))
    }

    pub fn stack_scalars(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() || parts.iter().any(|p| p.numel() != 1) {
            return Err(Error::Dimension("stack_scalars expects scalar parts".into()));
        }
        let data: Vec<f32> = parts.iter().map(|p| p.item()).collect();
        Ok(Tensor::from_op(
            vec![parts.len()],
            data,
            OpKind::StackScalars,
            parts.to_vec(),
        ))
    }

    /// Dot with a constant vector -> scalar. Differentiable w.r.t. self.
    pub fn weighted_sum_const(&self, coeffs: &[f32]) -> Result<Tensor> {
        if self.shape().len() != 1 || self.numel() != coeffs.len() {
            return Err(Error::Dimension(format!(
                "weighted_sum_const: {:?} vs {} coefficients",
                self.shape(),
                coeffs.len()
            )));
        }
        let v: f32 = self.data().iter().zip(coeffs).map(|(a, c)| a * c).sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            OpKind::WeightedSumConst(coeffs.to_vec()),
            vec![self.clone()],
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let v: f32 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![v], OpKind::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Tensor {
        let v: f32 = self.data().iter().sum::<f32>() / self.numel() as f32;
        Tensor::from_op(vec![1], vec![v], OpKind::MeanAll, vec![self.clone()])
    }

    /// Per-channel mean of an NCHW tensor.
    pub fn channel_mean(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("channel_mean expects NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let count = (n * h * w) as f32;
        let x = self.data();
        let mut out = vec![0.0f32; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let mut sum = 0.0;
                for k in 0..h * w {
                    sum += x[base + k];
                }
                out[ci] += sum;
            }
        }
        for v in &mut out {
            *v /= count;
        }
        drop(x);
        Ok(Tensor::from_op(vec![c], out, OpKind::ChannelMean, vec![self.clone()]))
    }

    /// Per-channel mean of squares of an NCHW tensor.
    pub fn channel_sq_mean(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("channel_sq_mean expects NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let count = (n * h * w) as f32;
        let x = self.data();
        let mut out = vec![0.0f32; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let mut sum = 0.0;
                for k in 0..h * w {
                    let v = x[base + k];
                    sum += v * v;
                }
                out[ci] += sum;
            }
        }
        for v in &mut out {
            *v /= count;
        }
        drop(x);
        Ok(Tensor::from_op(vec![c], out, OpKind::ChannelSqMean, vec![self.clone()]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            OpKind::Matmul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            OpKind::Reshape,
            vec![self.clone()],
        ))
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax_vec(&self) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::Dimension("softmax_vec expects rank 1".into()));
        }
        let y = softmax_slice(&self.data());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            OpKind::SoftmaxVec,
            vec![self.clone()],
        ))
    }

    /// Mean cross-entropy between logits (N, C) and integer labels.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {l} out of range for {c} classes")));
        }
        let z = self.data();
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            total += lse - row[label] as f64;
        }
        let v = (total / labels.len() as f64) as f32;
        drop(z);
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            OpKind::CrossEntropyMean { labels: labels.to_vec() },
            vec![self.clone()],
        ))
    }

    /// Batch-mean KL(teacher || student) on temperature-softened softmaxes.
    /// `teacher_probs` are already softened probabilities, length N*C.
    pub fn kl_from_teacher_mean(&self, teacher_probs: &[f32], temperature: f32) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] * s[1] != teacher_probs.len() {
            return Err(Error::Dimension(format!(
                "kl: logits {s:?} vs {} teacher probs",
                teacher_probs.len()
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::Contract("kl temperature must be positive".into()));
        }
        let (n, c) = (s[0], s[1]);
        let z = self.data();
        let mut total = 0.0f64;
        for i in 0..n {
            let row: Vec<f32> = z[i * c..(i + 1) * c].iter().map(|v| v / temperature).collect();
            let q = softmax_slice(&row);
            for j in 0..c {
                let p = teacher_probs[i * c + j] as f64;
                if p > 0.0 {
                    total += p * (p.ln() - (q[j] as f64).max(1e-30).ln());
                }
            }
        }
        let v = (total / n as f64) as f32;
        drop(z);
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            OpKind::KlTeacherStudentMean {
                teacher_probs: teacher_probs.to_vec(),
                temperature,
            },
            vec![self.clone()],
        ))
    }

    pub fn sq_diff_sum(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sq_diff_sum")?;
        let v: f32 = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            OpKind::SqDiffSum,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn sq_diff_mean(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sq_diff_mean")?;
        let v: f32 = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / self.numel() as f32;
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            OpKind::SqDiffMean,
            vec![self.clone(), other.clone()],
        ))
    }
}
