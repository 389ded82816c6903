//! FLOPs and parameter accounting (FLOPs = 2 x MAC), latency lookup tables,
//! differentiable expected supernet cost, and the marginal-cost rank selector
//! used as a baseline.
//!
//! Only convolutions and fully-connected layers contribute FLOPs and
//! parameters; normalization, activations and pooling count zero. The single
//! exception is the elementwise add joining the branches of a 2-branch
//! building block, charged one FLOP per output element so that residual
//! blocks are never spuriously free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BuildingBlock, LayerId, LayerKind, NetworkGraph, SuperCandidate};
use crate::lrspace::BlockConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub latency_ms: Option<f64>,
}

impl CostReport {
    pub fn add(&self, other: &CostReport) -> CostReport {
        CostReport {
            flops: self.flops + other.flops,
            params: self.params + other.params,
            latency_ms: match (self.latency_ms, other.latency_ms) {
                (Some(a), Some(b)) => Some(a + b),
                (a, b) => a.or(b),
            },
        }
    }
}

/// Cost of one grouped convolution: flops = 2*f*(c/g)*kh*kw*oh*ow,
/// params = f*(c/g)*kh*kw (+ f if biased).
#[allow(clippy::too_many_arguments)]
pub fn conv_cost(
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
    groups: usize,
    out_h: usize,
    out_w: usize,
    bias: bool,
) -> Result<CostReport> {
    if groups == 0 || f % groups != 0 || c % groups != 0 {
        return Err(Error::Contract(format!(
            "groups {groups} must divide filters {f} and channels {c}"
        )));
    }
    let weights = (f * (c / groups) * kh * kw) as u64;
    Ok(CostReport {
        flops: 2 * weights * (out_h * out_w) as u64,
        params: weights + if bias { f as u64 } else { 0 },
        latency_ms: None,
    })
}

pub fn dense_cost(input: usize, output: usize, bias: bool) -> CostReport {
    CostReport {
        flops: 2 * (input * output) as u64,
        params: (input * output + if bias { output } else { 0 }) as u64,
        latency_ms: None,
    }
}

/// Geometry of the layer a block replaces, fixing every cost computation.
#[derive(Debug, Clone, Copy)]
pub struct LayerGeometry {
    pub filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub bias: bool,
}

impl LayerGeometry {
    /// Read the geometry of a conv target from the graph.
    pub fn of_layer(graph: &NetworkGraph, id: LayerId) -> Result<LayerGeometry> {
        let layer = graph.layer(id)?;
        let LayerKind::Conv(spec) = &layer.kind else {
            return Err(Error::Contract(format!("layer {id} is not a convolution")));
        };
        let (kh, kw) = spec.kernel();
        if kh != kw {
            return Err(Error::Contract(format!("layer {id} kernel is not square")));
        }
        let ins = graph.in_shape(id)?;
        let outs = graph.out_shape(id)?;
        Ok(LayerGeometry {
            filters: spec.filters(),
            in_channels: spec.in_channels(),
            kernel: kh,
            stride: spec.stride,
            padding: spec.padding,
            in_hw: (ins[1], ins[2]),
            out_hw: (outs[1], outs[2]),
            bias: spec.bias.is_some(),
        })
    }

    pub fn original_cost(&self) -> Result<CostReport> {
        conv_cost(
            self.filters,
            self.in_channels,
            self.kernel,
            self.kernel,
            1,
            self.out_hw.0,
            self.out_hw.1,
            self.bias,
        )
    }
}

fn extent(inp: usize, pad: usize, k: usize, stride: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Spatial size between the two low-rank layers of a branch, following the
/// stride/padding placement rule.
pub fn mid_extent(cfg: &BlockConfig, geo: &LayerGeometry) -> (usize, usize) {
    let (s0, p0, _, _) = cfg.stride_padding_split(geo.stride, geo.padding);
    (
        extent(geo.in_hw.0, p0.0, cfg.kernel0.0, s0.0),
        extent(geo.in_hw.1, p0.1, cfg.kernel0.1, s0.1),
    )
}

/// Cost of one branch (two low-rank convolutions). `with_bias` charges the
/// original bias parameters to the second convolution.
pub fn branch_cost(cfg: &BlockConfig, geo: &LayerGeometry, with_bias: bool) -> Result<CostReport> {
    let mid_ch = cfg.mid_channels();
    let (mh, mw) = mid_extent(cfg, geo);
    let first = conv_cost(
        mid_ch,
        geo.in_channels,
        cfg.kernel0.0,
        cfg.kernel0.1,
        cfg.groups0,
        mh,
        mw,
        false,
    )?;
    let second = conv_cost(
        geo.filters,
        mid_ch,
        cfg.kernel1.0,
        cfg.kernel1.1,
        cfg.groups1,
        geo.out_hw.0,
        geo.out_hw.1,
        with_bias,
    )?;
    Ok(first.add(&second))
}

/// Cost of a whole block given its branch configs: branch costs plus one FLOP
/// per output element for each elementwise join.
pub fn block_cost(cfgs: &[BlockConfig], geo: &LayerGeometry) -> Result<CostReport> {
    if cfgs.is_empty() {
        return Err(Error::Contract("block has no branches".into()));
    }
    let mut total = CostReport::default();
    for (i, cfg) in cfgs.iter().enumerate() {
        total = total.add(&branch_cost(cfg, geo, i == 0 && geo.bias)?);
    }
    let joins = (cfgs.len() - 1) as u64;
    total.flops += joins * (geo.filters * geo.out_hw.0 * geo.out_hw.1) as u64;
    Ok(total)
}

fn block_configs(block: &BuildingBlock) -> Vec<BlockConfig> {
    block.branches.iter().map(|b| b.config).collect()
}

/// FLOPs and parameters of a whole graph. Fails on super blocks, whose cost
/// is only defined in expectation.
pub fn graph_cost(graph: &NetworkGraph) -> Result<CostReport> {
    let mut total = CostReport::default();
    for layer in graph.layers() {
        let out = graph.out_shape(layer.id)?;
        match &layer.kind {
            LayerKind::Conv(spec) => {
                let (kh, kw) = spec.kernel();
                total = total.add(&conv_cost(
                    spec.filters(),
                    spec.in_channels(),
                    kh,
                    kw,
                    spec.groups,
                    out[1],
                    out[2],
                    spec.bias.is_some(),
                )?);
            }
            LayerKind::Dense(spec) => {
                total = total.add(&dense_cost(spec.weight.shape()[0], spec.weight.shape()[1], true));
            }
            LayerKind::Block(block) => {
                let geo = block_geometry(graph, layer.id, block)?;
                total = total.add(&block_cost(&block_configs(block), &geo)?);
            }
            LayerKind::Super(_) => {
                return Err(Error::Contract(format!(
                    "layer {} is a super block; use the expected-cost path",
                    layer.id
                )));
            }
            _ => {}
        }
    }
    Ok(total)
}

fn block_geometry(graph: &NetworkGraph, id: LayerId, block: &BuildingBlock) -> Result<LayerGeometry> {
    let ins = graph.in_shape(id)?;
    let outs = graph.out_shape(id)?;
    Ok(LayerGeometry {
        filters: block.out_channels,
        in_channels: block.in_channels,
        kernel: block.orig_kernel.0,
        stride: block.orig_stride,
        padding: block.orig_padding,
        in_hw: (ins[1], ins[2]),
        out_hw: (outs[1], outs[2]),
        bias: block.branches[0].bias.is_some(),
    })
}

/// Cost of one super-block candidate under the layer geometry.
pub fn candidate_cost(cand: &SuperCandidate, geo: &LayerGeometry) -> Result<CostReport> {
    match cand {
        SuperCandidate::Conv(_) => geo.original_cost(),
        SuperCandidate::Block(b) => block_cost(&block_configs(b), geo),
    }
}

/// Differentiable expected cost: `fixed` plus, per super block, the dot
/// product of its (sampled) weight tensor with the matching candidate costs.
pub fn expected_supernet_cost(blocks: &[(Tensor, Vec<f64>)], fixed: f64) -> Result<Tensor> {
    let mut acc = Tensor::scalar(fixed as f32);
    for (weights, costs) in blocks {
        if weights.numel() != costs.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} candidate costs",
                weights.numel(),
                costs.len()
            )));
        }
        let coeffs: Vec<f32> = costs.iter().map(|&c| c as f32).collect();
        let term = weights.weighted_sum_const(&coeffs)?;
        acc = acc.add(&term)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Latency tables
// ---------------------------------------------------------------------------

/// Layer-signature to milliseconds lookup, consumed from a JSON artifact.
/// The convolution signature format is normative:
/// `conv,f,c,kh,kw,stride,groups,oh,ow` with `stride` printed as a single
/// number when symmetric and `shxsw` otherwise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    pub entries: BTreeMap<String, f64>,
}

fn stride_token(stride: (usize, usize)) -> String {
    if stride.0 == stride.1 {
        format!("{}", stride.0)
    } else {
        format!("{}x{}", stride.0, stride.1)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_sig(
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    groups: usize,
    oh: usize,
    ow: usize,
) -> String {
    format!("conv,{f},{c},{kh},{kw},{},{groups},{oh},{ow}", stride_token(stride))
}

impl LatencyTable {
    pub fn insert(&mut self, sig: impl Into<String>, ms: f64) {
        self.entries.insert(sig.into(), ms);
    }

    pub fn lookup(&self, sig: &str) -> Result<f64> {
        self.entries
            .get(sig)
            .copied()
            .ok_or_else(|| Error::LatencyLookup(sig.to_string()))
    }
}

/// Signatures of every latency-relevant kernel in a candidate.
pub fn candidate_sigs(cand: &SuperCandidate, geo: &LayerGeometry) -> Vec<String> {
    match cand {
        SuperCandidate::Conv(_) => vec![conv_sig(
            geo.filters,
            geo.in_channels,
            geo.kernel,
            geo.kernel,
            geo.stride,
            1,
            geo.out_hw.0,
            geo.out_hw.1,
        )],
        SuperCandidate::Block(b) => block_sigs(&block_configs(b), geo),
    }
}

pub fn block_sigs(cfgs: &[BlockConfig], geo: &LayerGeometry) -> Vec<String> {
    let mut sigs = Vec::new();
    for cfg in cfgs {
        let (s0, _, s1, _) = cfg.stride_padding_split(geo.stride, geo.padding);
        let (mh, mw) = mid_extent(cfg, geo);
        sigs.push(conv_sig(
            cfg.mid_channels(),
            geo.in_channels,
            cfg.kernel0.0,
            cfg.kernel0.1,
            s0,
            cfg.groups0,
            mh,
            mw,
        ));
        sigs.push(conv_sig(
            geo.filters,
            cfg.mid_channels(),
            cfg.kernel1.0,
            cfg.kernel1.1,
            s1,
            cfg.groups1,
            geo.out_hw.0,
            geo.out_hw.1,
        ));
    }
    if cfgs.len() > 1 {
        sigs.push(format!(
            "add,{f},{f},1,1,1,1,{oh},{ow}",
            f = geo.filters,
            oh = geo.out_hw.0,
            ow = geo.out_hw.1
        ));
    }
    sigs
}

fn layer_sig(graph: &NetworkGraph, layer: &crate::graph::Layer) -> Result<Vec<String>> {
    let out = graph.out_shape(layer.id)?.to_vec();
    let ins = graph.in_shape(layer.id)?;
    Ok(match &layer.kind {
        LayerKind::Conv(spec) => {
            let (kh, kw) = spec.kernel();
            vec![conv_sig(
                spec.filters(),
                spec.in_channels(),
                kh,
                kw,
                spec.stride,
                spec.groups,
                out[1],
                out[2],
            )]
        }
        LayerKind::Block(block) => {
            let geo = block_geometry(graph, layer.id, block)?;
            block_sigs(&block_configs(block), &geo)
        }
        LayerKind::BatchNorm(_) => vec![format!("bn,{c},{c},1,1,1,1,{},{}", out[1], out[2], c = out[0])],
        LayerKind::Relu => vec![format!("relu,{c},{c},1,1,1,1,{},{}", out[1], out[2], c = out[0])],
        LayerKind::MaxPool { kernel, stride } => vec![format!(
            "maxpool,{c},{c},{},{},{},1,{},{}",
            kernel.0,
            kernel.1,
            stride_token(*stride),
            out[1],
            out[2],
            c = out[0]
        )],
        LayerKind::AvgPool { kernel, stride } => vec![format!(
            "avgpool,{c},{c},{},{},{},1,{},{}",
            kernel.0,
            kernel.1,
            stride_token(*stride),
            out[1],
            out[2],
            c = out[0]
        )],
        LayerKind::GlobalAvgPool => vec![format!(
            "gap,{c},{c},{},{},1,1,1,1",
            ins[1],
            ins[2],
            c = ins[0]
        )],
        LayerKind::Flatten => vec![format!("flatten,{n},{n},1,1,1,1,1,1", n = out[0])],
        LayerKind::Dense(spec) => vec![format!(
            "dense,{},{},1,1,1,1,1,1",
            spec.weight.shape()[1],
            spec.weight.shape()[0]
        )],
        LayerKind::Add => vec![format!("add,{c},{c},1,1,1,1,{},{}", out[1], out[2], c = out[0])],
        LayerKind::Super(_) => {
            return Err(Error::Contract(format!(
                "layer {} is a super block; use the expected-cost path",
                layer.id
            )))
        }
    })
}

/// Table latency of a whole graph: the sum over every layer's signatures.
pub fn graph_latency(graph: &NetworkGraph, table: &LatencyTable) -> Result<f64> {
    let mut total = 0.0;
    for layer in graph.layers() {
        for sig in layer_sig(graph, layer)? {
            total += table.lookup(&sig)?;
        }
    }
    Ok(total)
}

/// Table latency of one candidate.
pub fn candidate_latency(cand: &SuperCandidate, geo: &LayerGeometry, table: &LatencyTable) -> Result<f64> {
    let mut total = 0.0;
    for sig in candidate_sigs(cand, geo) {
        total += table.lookup(&sig)?;
    }
    Ok(total)
}

/// Every signature a graph and an optional candidate space would look up;
/// used to build synthetic tables that cover a search.
pub fn graph_sigs(graph: &NetworkGraph) -> Result<Vec<String>> {
    let mut sigs = Vec::new();
    for layer in graph.layers() {
        sigs.extend(layer_sig(graph, layer)?);
    }
    Ok(sigs)
}

// ---------------------------------------------------------------------------
// Marginal-cost rank selection (data-free baseline)
// ---------------------------------------------------------------------------

/// Per layer, the minimal rank r with
/// `lambda*C(r+1) - lambda*C(r) - (mu/2)*s[r+1]^2 >= 0`; full rank when no r
/// satisfies it. `cost(layer, rank)` must be non-decreasing in rank.
pub fn lrs2_select_ranks(
    spectra: &[Vec<f32>],
    cost: impl Fn(usize, usize) -> f64,
    lambda: f64,
    mu: f64,
) -> Vec<usize> {
    spectra
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let full = s.len();
            for r in 1..full {
                let marginal =
                    lambda * (cost(k, r + 1) - cost(k, r)) - (mu / 2.0) * (s[r] as f64).powi(2);
                if marginal >= 0.0 {
                    return r;
                }
            }
            full
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mac_costs_two_flops_one_param() {
        let r = conv_cost(1, 1, 1, 1, 1, 1, 1, false).unwrap();
        assert_eq!(r.flops, 2);
        assert_eq!(r.params, 1);
    }

    #[test]
    fn reference_fixture_flops() {
        let r = conv_cost(64, 64, 3, 3, 1, 56, 56, false).unwrap();
        assert_eq!(r.flops, 231_211_008);
    }

    #[test]
    fn doubling_groups_halves_cost() {
        let a = conv_cost(8, 8, 3, 3, 1, 10, 10, false).unwrap();
        let b = conv_cost(8, 8, 3, 3, 2, 10, 10, false).unwrap();
        assert_eq!(a.flops, 2 * b.flops);
        assert_eq!(a.params, 2 * b.params);
    }

    #[test]
    fn full_rank_first_split_block_cost_fixture() {
        // (3,3)+(1,1), g=1, rank = min(36, 4) = 4 on a (4,4,3,3) layer with
        // 4x4 output: both convs run at output resolution.
        let geo = LayerGeometry {
            filters: 4,
            in_channels: 4,
            kernel: 3,
            stride: (1, 1),
            padding: (1, 1),
            in_hw: (4, 4),
            out_hw: (4, 4),
            bias: false,
        };
        let cfg = BlockConfig {
            kernel0: (3, 3),
            kernel1: (1, 1),
            groups0: 1,
            groups1: 1,
            rank: 4,
        };
        let r = block_cost(&[cfg], &geo).unwrap();
        // 2*(r*c*9 + f*r)*16 MAC-derived flops.
        assert_eq!(r.flops, 2 * (4 * 4 * 9 + 4 * 4) * 16);
        assert_eq!(r.flops, 5120);
    }

    #[test]
    fn one_branch_cost_is_two_branch_minus_join_and_branch() {
        let geo = LayerGeometry {
            filters: 8,
            in_channels: 4,
            kernel: 3,
            stride: (1, 1),
            padding: (1, 1),
            in_hw: (8, 8),
            out_hw: (8, 8),
            bias: false,
        };
        let a = BlockConfig { kernel0: (1, 1), kernel1: (3, 3), groups0: 1, groups1: 1, rank: 2 };
        let b = BlockConfig { kernel0: (3, 1), kernel1: (1, 3), groups0: 1, groups1: 1, rank: 3 };
        let one = block_cost(&[a], &geo).unwrap();
        let two = block_cost(&[a, b], &geo).unwrap();
        let join = (geo.filters * geo.out_hw.0 * geo.out_hw.1) as u64;
        let b_alone = branch_cost(&b, &geo, false).unwrap();
        assert_eq!(two.flops, one.flops + b_alone.flops + join);
    }

    #[test]
    fn expected_cost_at_simplex_vertices_and_uniform() {
        let w = Tensor::param(&[2], vec![1.0, 0.0]).unwrap();
        let c = expected_supernet_cost(&[(w, vec![100.0, 50.0])], 10.0).unwrap();
        assert!((c.item() - 110.0).abs() < 1e-4);
        let w = Tensor::param(&[2], vec![0.5, 0.5]).unwrap();
        let c = expected_supernet_cost(&[(w, vec![100.0, 50.0])], 0.0).unwrap();
        assert!((c.item() - 75.0).abs() < 1e-4);
    }

    #[test]
    fn latency_lookup_reports_missing_signature() {
        let table = LatencyTable::default();
        match table.lookup("conv,1,1,1,1,1,1,1,1") {
            Err(Error::LatencyLookup(sig)) => assert_eq!(sig, "conv,1,1,1,1,1,1,1,1"),
            other => panic!("expected lookup error, got {other:?}"),
        }
    }

    #[test]
    fn lrs2_degenerate_regularizer_picks_rank_one() {
        let spectra = vec![vec![3.0, 2.0, 1.0], vec![5.0, 0.5]];
        let ranks = lrs2_select_ranks(&spectra, |_, r| r as f64, 1.0, 0.0);
        assert_eq!(ranks, vec![1, 1]);
    }

    #[test]
    fn lrs2_no_cost_pressure_keeps_full_rank() {
        let spectra = vec![vec![3.0, 2.0, 1.0]];
        let ranks = lrs2_select_ranks(&spectra, |_, r| r as f64, 0.0, 1.0);
        assert_eq!(ranks, vec![3]);
    }

    #[test]
    fn lrs2_matches_brute_force_on_affine_cost() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let n = rng.gen_range(2..10);
            let mut s: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0f32..4.0)).collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let a = rng.gen_range(0.5f64..5.0);
            let lambda = rng.gen_range(0.1f64..2.0);
            let mu = rng.gen_range(0.1f64..2.0);
            let cost = |_: usize, r: usize| a * r as f64;
            let picked = lrs2_select_ranks(&[s.clone()], cost, lambda, mu)[0];
            // Brute force over the summed objective, first minimum wins.
            let objective = |r: usize| {
                lambda * cost(0, r)
                    + (mu / 2.0) * s[r..].iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()
            };
            let mut best = 1usize;
            for r in 1..=n {
                if objective(r) < objective(best) {
                    best = r;
                }
            }
            assert_eq!(picked, best, "spectrum {s:?} lambda {lambda} mu {mu}");
        }
    }
}
