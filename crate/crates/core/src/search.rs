//! Gradient-descent architecture search over the low-rank candidate space.
//!
//! Every target layer becomes a super block whose candidates are the original
//! layer plus its surviving low-rank blocks. Sampling parameters theta are
//! trained by descending `l_ce * [log(cost_hat)/log(cost_orig)]^beta`, with
//! two candidates sampled per block and forward pass. The iterative variant
//! runs a second pass over the residual error of the first winner, optionally
//! relaxing the first branch's rank beforehand.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{
    self, candidate_cost, candidate_latency, expected_supernet_cost, graph_cost, graph_latency,
    CostReport, LatencyTable, LayerGeometry,
};
use crate::error::{Error, Result};
use crate::graph::{
    LayerId, LayerKind, NetworkGraph, Replacement, SuperBlock, SuperCandidate, SupernetCtx,
    SupernetSample,
};
use crate::io::SpaceTable;
use crate::lrspace::{
    derive_weights, residual_error, truncate_rank, BlockConfig, BranchPlan, PlannedBranch,
};
use crate::graph::BuildingBlock;
use crate::graph::ForwardOptions;
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Flops,
    Latency,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Compression-pressure exponent of the search loss.
    pub beta: f64,
    pub objective: Objective,
    pub epochs_branch0: usize,
    pub epochs_branch1: usize,
    pub theta_lr: f32,
    pub theta_betas: (f32, f32),
    pub theta_weight_decay: f32,
    pub temperature_init: f32,
    pub temperature_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Rank relaxation between the two passes: reduce the winning rank until
    /// the saving reaches this fraction of the original layer's FLOPs.
    pub relax_fraction: Option<f64>,
    /// Grid used when pruning the residual-pass space.
    pub gamma: (f64, f64),
    pub grid_step: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beta: 48.0,
            objective: Objective::Flops,
            epochs_branch0: 100,
            epochs_branch1: 50,
            theta_lr: 0.01,
            theta_betas: (0.9, 0.999),
            theta_weight_decay: 5e-4,
            temperature_init: 5.0,
            temperature_decay: 0.965,
            batch_size: 250,
            seed: 0,
            relax_fraction: Some(0.20),
            gamma: (0.3, 0.9),
            grid_step: 0.05,
        }
    }
}

/// Handle into one super block of the supernet.
pub struct SuperHandle {
    pub layer: LayerId,
    pub theta: Tensor,
    /// Objective value per candidate (FLOPs or milliseconds).
    pub objective_costs: Vec<f64>,
    pub reports: Vec<CostReport>,
    pub descriptors: Vec<CandidateDescriptor>,
}

/// Serializable description of one candidate for checkpoints and reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateDescriptor {
    Incumbent,
    Block { branches: Vec<BlockConfig> },
}

pub struct Supernet {
    pub graph: NetworkGraph,
    pub handles: Vec<SuperHandle>,
    /// Objective cost of everything outside the super blocks.
    pub fixed_cost: f64,
    /// Objective cost of the uncompressed model (the loss denominator).
    pub original_cost: f64,
    /// Target layers left untouched because no candidates survived pruning.
    pub skipped: Vec<LayerId>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SearchState {
    pub epoch: usize,
    pub temperature: f32,
    pub loss_history: Vec<f64>,
}

/// The search loss `l_ce * [ln(cost_hat)/ln(cost_orig)]^beta`.
pub fn nas_loss(l_ce: &Tensor, cost_hat: &Tensor, cost_orig: f64, beta: f64) -> Result<Tensor> {
    if !(cost_orig > 1.0) {
        return Err(Error::Contract(format!(
            "original cost must exceed 1, got {cost_orig}"
        )));
    }
    if !(cost_hat.item() > 1.0) {
        return Err(Error::Contract(format!(
            "supernet cost must exceed 1, got {}",
            cost_hat.item()
        )));
    }
    let ratio = cost_hat.ln()?.scale(1.0 / (cost_orig.ln() as f32));
    l_ce.mul(&ratio.pow_const(beta as f32))
}

fn objective_value(
    cand: &SuperCandidate,
    geo: &LayerGeometry,
    objective: Objective,
    latency: Option<&LatencyTable>,
) -> Result<(f64, CostReport)> {
    let report = candidate_cost(cand, geo)?;
    let value = match objective {
        Objective::Flops => report.flops as f64,
        Objective::Latency => {
            let table = latency.ok_or_else(|| {
                Error::Contract("latency objective requires a latency table".into())
            })?;
            candidate_latency(cand, geo, table)?
        }
    };
    Ok((value, report))
}

fn graph_objective(
    graph: &NetworkGraph,
    objective: Objective,
    latency: Option<&LatencyTable>,
) -> Result<f64> {
    Ok(match objective {
        Objective::Flops => graph_cost(graph)?.flops as f64,
        Objective::Latency => {
            let table = latency.ok_or_else(|| {
                Error::Contract("latency objective requires a latency table".into())
            })?;
            graph_latency(graph, table)?
        }
    })
}

fn attach_superblocks(
    graph: &NetworkGraph,
    per_layer: BTreeMap<LayerId, Vec<(SuperCandidate, CandidateDescriptor)>>,
    cfg: &SearchConfig,
    latency: Option<&LatencyTable>,
) -> Result<Supernet> {
    let original_cost = graph_objective(graph, cfg.objective, latency)?;
    let mut supernet_graph = graph.clone();
    let mut handles = Vec::new();
    let mut skipped = Vec::new();
    let mut super_original_total = 0.0;

    for (&layer, _) in per_layer.iter() {
        if !graph.targets().contains(&layer) {
            return Err(Error::Contract(format!("layer {layer} is not a compression target")));
        }
    }

    for (layer, candidates) in per_layer {
        if candidates.len() <= 1 {
            skipped.push(layer);
            continue;
        }
        let geo = layer_geometry_any(graph, layer)?;
        let mut cands = Vec::new();
        let mut descriptors = Vec::new();
        let mut objective_costs = Vec::new();
        let mut reports = Vec::new();
        for (cand, desc) in candidates {
            let (value, report) = objective_value(&cand, &geo, cfg.objective, latency)?;
            cands.push(cand);
            descriptors.push(desc);
            objective_costs.push(value);
            reports.push(report);
        }
        super_original_total += objective_costs[0];
        let sb = SuperBlock::new(cands, reports.clone(), cfg.temperature_init)?;
        let theta = sb.theta.clone();
        supernet_graph = supernet_graph.substitute(layer, Replacement::Super(sb))?;
        handles.push(SuperHandle {
            layer,
            theta,
            objective_costs,
            reports,
            descriptors,
        });
    }

    Ok(Supernet {
        graph: supernet_graph,
        handles,
        fixed_cost: original_cost - super_original_total,
        original_cost,
        skipped,
    })
}

/// Geometry of a target layer whether it currently holds a conv or a block.
fn layer_geometry_any(graph: &NetworkGraph, id: LayerId) -> Result<LayerGeometry> {
    let layer = graph.layer(id)?;
    match &layer.kind {
        LayerKind::Conv(_) => LayerGeometry::of_layer(graph, id),
        LayerKind::Block(b) => {
            let ins = graph.in_shape(id)?;
            let outs = graph.out_shape(id)?;
            Ok(LayerGeometry {
                filters: b.out_channels,
                in_channels: b.in_channels,
                kernel: b.orig_kernel.0,
                stride: b.orig_stride,
                padding: b.orig_padding,
                in_hw: (ins[1], ins[2]),
                out_hw: (outs[1], outs[2]),
                bias: b.branches[0].bias.is_some(),
            })
        }
        _ => Err(Error::Contract(format!("layer {id} is not a conv or block"))),
    }
}

/// Build the first-pass supernet: candidate 0 is the original layer, the rest
/// are blocks materialized from the surviving space-table candidates.
pub fn build_supernet(
    graph: &NetworkGraph,
    table: &SpaceTable,
    cfg: &SearchConfig,
    latency: Option<&LatencyTable>,
) -> Result<Supernet> {
    let mut per_layer = BTreeMap::new();
    for &layer in graph.targets() {
        let LayerKind::Conv(orig) = &graph.layer(layer)?.kind else {
            return Err(Error::Contract(format!("target {layer} is not a convolution")));
        };
        let mut cands = vec![(
            SuperCandidate::Conv(orig.clone()),
            CandidateDescriptor::Incumbent,
        )];
        for config in table.surviving(layer) {
            let (w0, w1) = derive_weights(&orig.weight, &config)?;
            let block =
                BuildingBlock::from_plan(orig, &BranchPlan::single(config, w0, w1))?;
            cands.push((
                SuperCandidate::Block(block),
                CandidateDescriptor::Block { branches: vec![config] },
            ));
        }
        per_layer.insert(layer, cands);
    }
    attach_superblocks(graph, per_layer, cfg, latency)
}

/// One optimization epoch over the batches: sample two candidates per super
/// block, descend theta on the search loss, then decay the temperature.
pub fn search_epoch(
    supernet: &mut Supernet,
    state: &mut SearchState,
    batches: &[(Tensor, Vec<usize>)],
    cfg: &SearchConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let thetas: Vec<Tensor> = supernet.handles.iter().map(|h| h.theta.clone()).collect();
    supernet.graph.set_super_temperature(state.temperature);
    for (batch, labels) in batches {
        let mut opts = ForwardOptions {
            supernet: Some(SupernetCtx {
                sample: SupernetSample::SamplePair,
                rng,
            }),
            ..Default::default()
        };
        let out = supernet.graph.forward(batch, &mut opts)?;
        let l_ce = out.logits.cross_entropy_mean(labels)?;

        let mut sampled_terms = Vec::new();
        for handle in &supernet.handles {
            let mix = out.sampled.get(&handle.layer).ok_or_else(|| {
                Error::Contract(format!("super layer {} produced no sample", handle.layer))
            })?;
            let costs: Vec<f64> = mix
                .indices
                .iter()
                .map(|&i| handle.objective_costs[i])
                .collect();
            sampled_terms.push((mix.weights.clone(), costs));
        }
        let cost_hat = expected_supernet_cost(&sampled_terms, supernet.fixed_cost)?;
        let loss = nas_loss(&l_ce, &cost_hat, supernet.original_cost, cfg.beta)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(Error::Training {
                epoch: state.epoch,
                msg: format!("search loss diverged to {lv}"),
            });
        }
        state.loss_history.push(lv);

        for t in &thetas {
            t.zero_grad();
        }
        loss.backward()?;
        adam.step(&thetas);
    }
    state.epoch += 1;
    state.temperature *= cfg.temperature_decay;
    Ok(())
}

/// Run `epochs` searching epochs from a fresh optimizer and RNG stream.
pub fn run_search(
    supernet: &mut Supernet,
    batches: &[(Tensor, Vec<usize>)],
    cfg: &SearchConfig,
    epochs: usize,
    seed_lane: u64,
) -> Result<SearchState> {
    let mut state = SearchState {
        epoch: 0,
        temperature: cfg.temperature_init,
        loss_history: Vec::new(),
    };
    let mut adam = Adam::new(cfg.theta_lr, cfg.theta_betas, cfg.theta_weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ seed_lane.wrapping_mul(0x9E3779B97F4A7C15));
    for _ in 0..epochs {
        search_epoch(supernet, &mut state, batches, cfg, &mut adam, &mut rng)?;
    }
    Ok(state)
}

/// Winner of one super block after search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub layer: u32,
    pub candidate: usize,
    pub descriptor: CandidateDescriptor,
    pub flops: u64,
    pub params: u64,
}

/// Argmax-theta selection with ties broken toward the lowest-FLOPs candidate;
/// super blocks are replaced by their winners.
pub fn select_final(supernet: &Supernet) -> Result<(NetworkGraph, Vec<Selection>)> {
    let mut graph = supernet.graph.clone();
    let mut selections = Vec::new();
    for handle in &supernet.handles {
        let theta = handle.theta.to_vec();
        let best_theta = theta.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut winner: Option<usize> = None;
        for (i, &t) in theta.iter().enumerate() {
            if t == best_theta {
                let better = match winner {
                    None => true,
                    Some(w) => handle.reports[i].flops < handle.reports[w].flops,
                };
                if better {
                    winner = Some(i);
                }
            }
        }
        let idx = winner.expect("super block has candidates");
        let layer = graph.layer(handle.layer)?;
        let LayerKind::Super(sb) = &layer.kind else {
            return Err(Error::Contract(format!("layer {} is not a super block", handle.layer)));
        };
        let replacement = match &sb.candidates[idx] {
            SuperCandidate::Conv(spec) => Replacement::Conv(spec.clone()),
            SuperCandidate::Block(b) => Replacement::Block(b.clone()),
        };
        graph = graph.substitute(handle.layer, replacement)?;
        selections.push(Selection {
            layer: handle.layer.0,
            candidate: idx,
            descriptor: handle.descriptors[idx].clone(),
            flops: handle.reports[idx].flops,
            params: handle.reports[idx].params,
        });
    }
    Ok((graph, selections))
}

/// Outcome of a full (possibly two-pass) search.
pub struct SearchOutcome {
    pub graph: NetworkGraph,
    pub selections: Vec<Selection>,
    pub states: Vec<SearchState>,
}

/// Single-pass search: build, train theta, select.
pub fn single_branch_search(
    graph: &NetworkGraph,
    table: &SpaceTable,
    batches: &[(Tensor, Vec<usize>)],
    cfg: &SearchConfig,
    latency: Option<&LatencyTable>,
) -> Result<SearchOutcome> {
    let mut supernet = build_supernet(graph, table, cfg, latency)?;
    let state = run_search(&mut supernet, batches, cfg, cfg.epochs_branch0, 0)?;
    let (selected, selections) = select_final(&supernet)?;
    Ok(SearchOutcome {
        graph: selected,
        selections,
        states: vec![state],
    })
}

/// The rank reduction whose FLOPs saving first reaches `fraction` of the
/// original layer's FLOPs; block cost is affine in rank, so this inverts the
/// per-rank slope. Clamps to rank 1.
fn relaxed_rank(config: &BlockConfig, geo: &LayerGeometry, fraction: f64) -> Result<usize> {
    if config.rank == 1 {
        return Ok(1);
    }
    let orig = geo.original_cost()?.flops as f64;
    let at = |r: usize| -> Result<f64> {
        Ok(cost::block_cost(&[BlockConfig { rank: r, ..*config }], geo)?.flops as f64)
    };
    let slope = at(config.rank)? - at(config.rank - 1)?;
    if slope <= 0.0 {
        return Ok(config.rank);
    }
    let delta = (fraction * orig / slope).ceil() as usize;
    Ok(config.rank.saturating_sub(delta.max(1)).max(1))
}

/// Two-pass iterative search. Pass 0 searches one-branch candidates; winners
/// optionally get their rank relaxed; pass 1 enumerates a fresh space over
/// each winner's residual error and searches the second branch with the first
/// frozen. Layers whose pass-0 winner is the incumbent are excluded from
/// pass 1.
pub fn iterative_search(
    graph: &NetworkGraph,
    table: &SpaceTable,
    batches: &[(Tensor, Vec<usize>)],
    cfg: &SearchConfig,
    latency: Option<&LatencyTable>,
) -> Result<SearchOutcome> {
    let mut supernet = build_supernet(graph, table, cfg, latency)?;
    let state0 = run_search(&mut supernet, batches, cfg, cfg.epochs_branch0, 0)?;
    let (_, selections0) = select_final(&supernet)?;

    // Collect pass-0 winning plans (branch 0) per layer.
    let mut pass1: BTreeMap<LayerId, Vec<(SuperCandidate, CandidateDescriptor)>> = BTreeMap::new();
    let mut base_graph = graph.clone();
    for sel in &selections0 {
        let layer = LayerId(sel.layer);
        let CandidateDescriptor::Block { branches } = &sel.descriptor else {
            continue; // incumbent won; excluded from the residual pass
        };
        let mut config = branches[0];
        let LayerKind::Conv(orig) = &graph.layer(layer)?.kind else {
            return Err(Error::Contract(format!("target {layer} is not a convolution")));
        };
        let geo = LayerGeometry::of_layer(graph, layer)?;
        let (mut w0, mut w1) = derive_weights(&orig.weight, &config)?;
        if let Some(fraction) = cfg.relax_fraction {
            let relaxed = relaxed_rank(&config, &geo, fraction)?;
            if relaxed < config.rank {
                let (c2, t0, t1) = truncate_rank(&config, &w0, &w1, relaxed)?;
                config = c2;
                w0 = t0;
                w1 = t1;
            }
        }
        let plan0 = BranchPlan::single(config, w0.clone(), w1.clone());
        let base_block = BuildingBlock::from_plan(orig, &plan0)?;
        base_graph = base_graph.substitute(layer, Replacement::Block(base_block.clone()))?;

        // Residual space over E = W - F0, pruned on total two-branch cost.
        let error = residual_error(&orig.weight, &plan0)?;
        let full = crate::lrspace::enumerate_space(geo.filters, geo.in_channels, geo.kernel);
        let orig_flops = geo.original_cost()?.flops as f64;
        let ratio = |cand: &BlockConfig| -> f64 {
            cost::block_cost(&[config, *cand], &geo)
                .map(|r| r.flops as f64 / orig_flops)
                .unwrap_or(f64::INFINITY)
        };
        let kept = crate::lrspace::prune_by_flops(&full, ratio, cfg.gamma, cfg.grid_step)?;

        let mut cands = vec![(
            SuperCandidate::Block(base_block),
            CandidateDescriptor::Block { branches: vec![config] },
        )];
        for cand_cfg in kept {
            let (e0, e1) = derive_weights(&error, &cand_cfg)?;
            let plan = BranchPlan {
                branches: vec![
                    PlannedBranch { config, w0: w0.clone(), w1: w1.clone() },
                    PlannedBranch { config: cand_cfg, w0: e0, w1: e1 },
                ],
            };
            cands.push((
                SuperCandidate::Block(BuildingBlock::from_plan(orig, &plan)?),
                CandidateDescriptor::Block { branches: vec![config, cand_cfg] },
            ));
        }
        pass1.insert(layer, cands);
    }

    if pass1.is_empty() {
        // Nothing was compressed; the one-branch outcome stands.
        let (sel_graph, selections) = select_final(&supernet)?;
        return Ok(SearchOutcome {
            graph: sel_graph,
            selections,
            states: vec![state0],
        });
    }

    let mut supernet1 = attach_superblocks(&base_graph, pass1, cfg, latency)?;
    let state1 = run_search(&mut supernet1, batches, cfg, cfg.epochs_branch1, 1)?;
    let (final_graph, selections1) = select_final(&supernet1)?;

    // Merge: layers untouched by pass 1 keep their pass-0 selection.
    let mut merged = Vec::new();
    let pass1_layers: Vec<u32> = selections1.iter().map(|s| s.layer).collect();
    for sel in selections0 {
        if !pass1_layers.contains(&sel.layer) {
            merged.push(sel);
        }
    }
    merged.extend(selections1);
    merged.sort_by_key(|s| s.layer);

    Ok(SearchOutcome {
        graph: final_graph,
        selections: merged,
        states: vec![state0, state1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nas_loss_algebra() {
        let l = Tensor::param(&[1], vec![2.0]).unwrap();
        // beta = 0 -> loss = l_ce.
        let hat = Tensor::param(&[1], vec![123.0]).unwrap();
        let loss = nas_loss(&l, &hat, 456.0, 0.0).unwrap();
        assert!((loss.item() - 2.0).abs() < 1e-6);
        // cost_hat == cost_orig -> ratio 1 -> loss = l_ce.
        let hat = Tensor::param(&[1], vec![456.0]).unwrap();
        let loss = nas_loss(&l, &hat, 456.0, 7.0).unwrap();
        assert!((loss.item() - 2.0).abs() < 1e-5);
        // Hand evaluation: l_ce=2, hat=e^2, orig=e^4, beta=2 -> 2*(0.5)^2 = 0.5.
        let hat = Tensor::param(&[1], vec![std::f32::consts::E.powi(2)]).unwrap();
        let loss = nas_loss(&l, &hat, (std::f64::consts::E).powi(4), 2.0).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-4);
        // Non-positive cost is rejected.
        let hat = Tensor::param(&[1], vec![0.5]).unwrap();
        assert!(nas_loss(&l, &hat, 456.0, 1.0).is_err());
    }

    #[test]
    fn nas_loss_gradient_reaches_cost() {
        let l = Tensor::param(&[1], vec![1.5]).unwrap();
        let hat = Tensor::param(&[1], vec![100.0]).unwrap();
        let loss = nas_loss(&l, &hat, 1000.0, 4.0).unwrap();
        loss.backward().unwrap();
        assert!(l.grad().is_some());
        let g = hat.grad().unwrap()[0];
        assert!(g.is_finite() && g != 0.0);
    }
}
