//! Low-rank building blocks and search-time super blocks.

use std::collections::BTreeMap;

use rand::Rng;

use super::{clone_param, ConvSpec, LayerId, SampledMix, SupernetCtx, SupernetSample};
use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::lrspace::{BlockConfig, BranchPlan};
use crate::tensor::{conv2d, gumbel_softmax, Tensor};

/// One branch: two consecutive convolutions whose weights factorize (part of)
/// the original layer. Stride and padding placement follows the kernel split.
#[derive(Clone)]
pub struct LowRankBranch {
    pub config: BlockConfig,
    pub w0: Tensor,
    pub w1: Tensor,
    /// Bias on the second convolution; only branch 0 carries one.
    pub bias: Option<Tensor>,
    pub stride0: (usize, usize),
    pub padding0: (usize, usize),
    pub stride1: (usize, usize),
    pub padding1: (usize, usize),
}

impl LowRankBranch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mid = conv2d(x, &self.w0, None, self.stride0, self.padding0, self.config.groups0)?;
        conv2d(
            &mid,
            &self.w1,
            self.bias.as_ref(),
            self.stride1,
            self.padding1,
            self.config.groups1,
        )
    }

    fn deep_clone(&self) -> LowRankBranch {
        LowRankBranch {
            w0: clone_param(&self.w0),
            w1: clone_param(&self.w1),
            bias: self.bias.as_ref().map(clone_param),
            ..*self
        }
    }
}

/// Drop-in replacement for a convolution: 1 or 2 branches summed elementwise,
/// same input/output contract as the layer it replaces.
#[derive(Clone)]
pub struct BuildingBlock {
    pub branches: Vec<LowRankBranch>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub orig_kernel: (usize, usize),
    pub orig_stride: (usize, usize),
    pub orig_padding: (usize, usize),
}

impl BuildingBlock {
    /// Materialize a block from a derivation plan against the original conv.
    /// Branch weights become fresh trainable parameters; the original bias
    /// attaches unchanged to the second conv of branch 0.
    pub fn from_plan(orig: &ConvSpec, plan: &BranchPlan) -> Result<BuildingBlock> {
        if plan.branches.is_empty() || plan.branches.len() > 2 {
            return Err(Error::Contract(format!(
                "a building block has 1 or 2 branches, got {}",
                plan.branches.len()
            )));
        }
        if orig.groups != 1 {
            return Err(Error::Contract(
                "compression targets must be ungrouped convolutions".into(),
            ));
        }
        let (kh, kw) = orig.kernel();
        if kh != kw {
            return Err(Error::Contract("compression targets must have square kernels".into()));
        }
        let (f, c) = (orig.filters(), orig.in_channels());
        let mut branches = Vec::with_capacity(plan.branches.len());
        for (i, br) in plan.branches.iter().enumerate() {
            br.config.validate_shape(f, c, kh)?;
            let (s0, p0, s1, p1) = br.config.stride_padding_split(orig.stride, orig.padding);
            branches.push(LowRankBranch {
                config: br.config,
                w0: clone_param(&br.w0),
                w1: clone_param(&br.w1),
                bias: if i == 0 { orig.bias.as_ref().map(clone_param) } else { None },
                stride0: s0,
                padding0: p0,
                stride1: s1,
                padding1: p1,
            });
        }
        Ok(BuildingBlock {
            branches,
            in_channels: c,
            out_channels: f,
            orig_kernel: (kh, kw),
            orig_stride: orig.stride,
            orig_padding: orig.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for br in &self.branches {
            let y = br.forward(x)?;
            acc = Some(match acc {
                None => y,
                Some(prev) => prev.add(&y)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("building block has no branches".into()))
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for br in &self.branches {
            out.push(br.w0.clone());
            out.push(br.w1.clone());
            if let Some(b) = &br.bias {
                out.push(b.clone());
            }
        }
        out
    }

    pub fn deep_clone(&self) -> BuildingBlock {
        BuildingBlock {
            branches: self.branches.iter().map(|b| b.deep_clone()).collect(),
            ..*self
        }
    }
}

/// A candidate inside a super block: the layer kept as-is, or a block.
#[derive(Clone)]
pub enum SuperCandidate {
    Conv(ConvSpec),
    Block(BuildingBlock),
}

impl SuperCandidate {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            SuperCandidate::Conv(spec) => conv2d(
                x,
                &spec.weight,
                spec.bias.as_ref(),
                spec.stride,
                spec.padding,
                spec.groups,
            ),
            SuperCandidate::Block(b) => b.forward(x),
        }
    }
}

/// Search-time container: every candidate of one layer plus the sampling
/// parameters that weight them.
#[derive(Clone)]
pub struct SuperBlock {
    /// Candidate 0 is the incumbent (the original layer in the first pass).
    pub candidates: Vec<SuperCandidate>,
    /// Sampling logits, one per candidate; trained by the search.
    pub theta: Tensor,
    pub temperature: f32,
    /// Cost of each candidate under the active objective.
    pub costs: Vec<CostReport>,
    io: Io,
}

#[derive(Clone, Copy)]
struct Io {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
}

impl SuperBlock {
    pub fn new(
        candidates: Vec<SuperCandidate>,
        costs: Vec<CostReport>,
        temperature: f32,
    ) -> Result<SuperBlock> {
        if candidates.is_empty() {
            return Err(Error::Contract("super block needs at least one candidate".into()));
        }
        if candidates.len() != costs.len() {
            return Err(Error::Contract("one cost per candidate required".into()));
        }
        let io = match &candidates[0] {
            SuperCandidate::Conv(s) => Io {
                in_channels: s.in_channels(),
                out_channels: s.filters(),
                kernel: s.kernel(),
                stride: s.stride,
                padding: s.padding,
            },
            SuperCandidate::Block(b) => Io {
                in_channels: b.in_channels,
                out_channels: b.out_channels,
                kernel: b.orig_kernel,
                stride: b.orig_stride,
                padding: b.orig_padding,
            },
        };
        let theta = Tensor::param(&[candidates.len()], vec![0.0; candidates.len()])?;
        Ok(SuperBlock {
            candidates,
            theta,
            temperature,
            costs,
            io,
        })
    }

    pub fn io_contract(&self) -> (usize, usize, (usize, usize), (usize, usize), (usize, usize)) {
        (
            self.io.in_channels,
            self.io.out_channels,
            self.io.kernel,
            self.io.stride,
            self.io.padding,
        )
    }

    /// Forward under the sampling mode of `ctx`, returning the output and the
    /// mixture record when candidates were weighted stochastically.
    pub(crate) fn forward_mixed(
        &self,
        x: &Tensor,
        layer: LayerId,
        ctx: &mut SupernetCtx<'_>,
    ) -> Result<(Tensor, Option<SampledMix>)> {
        let n = self.candidates.len();
        match &ctx.sample {
            SupernetSample::Select(choice) => {
                let &idx = choice.get(&layer).ok_or_else(|| {
                    Error::Contract(format!("no candidate selected for super layer {layer}"))
                })?;
                if idx >= n {
                    return Err(Error::Contract(format!(
                        "selected candidate {idx} out of range for layer {layer}"
                    )));
                }
                Ok((self.candidates[idx].forward(x)?, None))
            }
            SupernetSample::WeightAll => {
                let weights = gumbel_softmax(&self.theta, self.temperature, ctx.rng)?;
                let out = self.mix(x, &(0..n).collect::<Vec<_>>(), &weights)?;
                Ok((
                    out,
                    Some(SampledMix {
                        indices: (0..n).collect(),
                        weights,
                    }),
                ))
            }
            SupernetSample::SamplePair => {
                if n == 1 {
                    let weights = gumbel_softmax(&self.theta, self.temperature, ctx.rng)?;
                    let out = self.mix(x, &[0], &weights)?;
                    return Ok((out, Some(SampledMix { indices: vec![0], weights })));
                }
                let probs = crate::tensor::Tensor::from_vec(
                    &[n],
                    self.theta.to_vec(),
                )?
                .softmax_vec()?
                .to_vec();
                let a = sample_categorical(&probs, ctx.rng);
                let mut rest = probs.clone();
                rest[a] = 0.0;
                let b = sample_categorical(&rest, ctx.rng);
                let pair_logits = Tensor::stack_scalars(&[
                    self.theta.index_scalar(a)?,
                    self.theta.index_scalar(b)?,
                ])?;
                let weights = gumbel_softmax(&pair_logits, self.temperature, ctx.rng)?;
                let out = self.mix(x, &[a, b], &weights)?;
                Ok((
                    out,
                    Some(SampledMix {
                        indices: vec![a, b],
                        weights,
                    }),
                ))
            }
        }
    }

    fn mix(&self, x: &Tensor, indices: &[usize], weights: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (slot, &idx) in indices.iter().enumerate() {
            let y = self.candidates[idx].forward(x)?;
            let scaled = y.scale_by(&weights.index_scalar(slot)?)?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => prev.add(&scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("empty candidate mix".into()))
    }
}

/// Draw an index proportionally to the (not necessarily normalized) weights.
fn sample_categorical(weights: &[f32], rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().map(|&w| w.max(0.0) as f64).sum();
    let mut u: f64 = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w.max(0.0) as f64;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Per-layer selection map for deterministic supernet forwards.
pub type SelectionMap = BTreeMap<LayerId, usize>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrspace::{derive_weights, BlockConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orig_conv(rng: &mut ChaCha8Rng) -> ConvSpec {
        ConvSpec {
            weight: Tensor::randn(&[4, 4, 3, 3], rng),
            bias: Some(Tensor::randn(&[4], rng)),
            stride: (1, 1),
            padding: (1, 1),
            groups: 1,
        }
    }

    #[test]
    fn full_rank_block_matches_original_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let orig = orig_conv(&mut rng);
        let cfg = BlockConfig {
            kernel0: (3, 3),
            kernel1: (1, 1),
            groups0: 1,
            groups1: 1,
            rank: 4,
        };
        let (w0, w1) = derive_weights(&orig.weight, &cfg).unwrap();
        let block = BuildingBlock::from_plan(&orig, &BranchPlan::single(cfg, w0, w1)).unwrap();
        let x = Tensor::randn(&[2, 4, 5, 5], &mut rng);
        let want = conv2d(&x, &orig.weight, orig.bias.as_ref(), (1, 1), (1, 1), 1).unwrap();
        let got = block.forward(&x).unwrap();
        let num: f32 = want
            .to_vec()
            .iter()
            .zip(got.to_vec())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        let den: f32 = want.to_vec().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(num / den < 1e-4, "relative error {}", num / den);
    }

    #[test]
    fn zeroed_second_branch_equals_single_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let orig = orig_conv(&mut rng);
        let cfg = BlockConfig {
            kernel0: (1, 1),
            kernel1: (3, 3),
            groups0: 1,
            groups1: 1,
            rank: 2,
        };
        let (w0, w1) = derive_weights(&orig.weight, &cfg).unwrap();
        let one = BuildingBlock::from_plan(&orig, &BranchPlan::single(cfg, w0.clone(), w1.clone())).unwrap();
        let plan2 = BranchPlan {
            branches: vec![
                crate::lrspace::PlannedBranch { config: cfg, w0: w0.clone(), w1: w1.clone() },
                crate::lrspace::PlannedBranch {
                    config: cfg,
                    w0: Tensor::zeros(w0.shape()),
                    w1: Tensor::zeros(w1.shape()),
                },
            ],
        };
        let two = BuildingBlock::from_plan(&orig, &plan2).unwrap();
        let x = Tensor::randn(&[1, 4, 6, 6], &mut rng);
        assert_eq!(one.forward(&x).unwrap().to_vec(), two.forward(&x).unwrap().to_vec());
    }

    #[test]
    fn super_block_select_equals_candidate_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let orig = orig_conv(&mut rng);
        let cfg = BlockConfig {
            kernel0: (3, 3),
            kernel1: (1, 1),
            groups0: 1,
            groups1: 1,
            rank: 2,
        };
        let (w0, w1) = derive_weights(&orig.weight, &cfg).unwrap();
        let block = BuildingBlock::from_plan(&orig, &BranchPlan::single(cfg, w0, w1)).unwrap();
        let sb = SuperBlock::new(
            vec![SuperCandidate::Conv(orig.clone()), SuperCandidate::Block(block.clone())],
            vec![CostReport::default(), CostReport::default()],
            5.0,
        )
        .unwrap();
        let x = Tensor::randn(&[1, 4, 5, 5], &mut rng);
        let mut choice = SelectionMap::new();
        choice.insert(LayerId(0), 1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = SupernetCtx {
            sample: SupernetSample::Select(&choice),
            rng: &mut rng2,
        };
        let (y, mix) = sb.forward_mixed(&x, LayerId(0), &mut ctx).unwrap();
        assert!(mix.is_none());
        let want = block.forward(&x).unwrap();
        for (a, b) in y.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
