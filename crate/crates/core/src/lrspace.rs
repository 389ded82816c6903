//! The per-layer design space of low-rank substitutions.
//!
//! A convolution with weight (f, c, k, k) can be replaced by two consecutive
//! convolutions whose weights come from a truncated SVD of reshaped weight
//! slices. A point of the space is a [`BlockConfig`]: the kernel split across
//! the two layers, the group pair, and the retained rank.
//!
//! # Enumeration convention
//!
//! `enumerate_space` emits exactly the configs satisfying, for a layer
//! (f, c, k, k) with k prime or 1:
//!
//! 1. kernel splits with per-dimension product k: `(1,1)+(k,k)`,
//!    `(k,k)+(1,1)`, `(k,1)+(1,k)`, `(1,k)+(k,1)` (a single `(1,1)+(1,1)`
//!    split when k = 1);
//! 2. group pairs (g0, g1) with min(g0, g1) = 1, g0 dividing c, g1 dividing f;
//! 3. every integer rank r from 1 up to the SVD bound
//!    min((f/g1)·k1h·k1w, (c/g0)·k0h·k0w) that also keeps the factored weight
//!    count strictly below the original:
//!    r·max(g0,g1)·((c/g0)·k0h·k0w + (f/g1)·k1h·k1w) < c·f·k·k.
//!
//! Under this convention a (64, 64, 3, 3) layer has 1322 candidates. The
//! commonly quoted figure of 74902 candidates for that geometry is not
//! reachable by any single-layer reading of the three constraints (every
//! defensible variant we tested lands between ~1.3k and ~3.6k); it does match
//! this convention summed over a ResNet-18-style target set of fifteen 3x3
//! layers (74745, within 0.3%), so we treat it as a per-network total and
//! keep the per-layer convention above. `enumeration_notes` returns this
//! calibration record.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{evaluate, BuildingBlock, LayerId, LayerKind, NetworkGraph, Replacement};
use crate::tensor::{svd, Tensor};

/// One point of the low-rank design space for a (f, c, k, k) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Kernel extents (h, w) of the first low-rank layer.
    pub kernel0: (usize, usize),
    /// Kernel extents (h, w) of the second low-rank layer.
    pub kernel1: (usize, usize),
    /// Groups of the first low-rank layer; divides c.
    pub groups0: usize,
    /// Groups of the second low-rank layer; divides f.
    pub groups1: usize,
    /// Singular values retained per weight slice.
    pub rank: usize,
}

impl BlockConfig {
    pub fn max_groups(&self) -> usize {
        self.groups0.max(self.groups1)
    }

    /// Channels between the two low-rank layers.
    pub fn mid_channels(&self) -> usize {
        self.rank * self.max_groups()
    }

    pub fn split_label(&self) -> String {
        format!(
            "{}x{}+{}x{}",
            self.kernel0.0, self.kernel0.1, self.kernel1.0, self.kernel1.1
        )
    }

    /// Weight-slice matrix dimensions (rows, cols) for a (f, c) layer.
    pub fn slice_dims(&self, f: usize, c: usize) -> (usize, usize) {
        (
            (f / self.groups1) * self.kernel1.0 * self.kernel1.1,
            (c / self.groups0) * self.kernel0.0 * self.kernel0.1,
        )
    }

    /// Parameter count of the two factored weights.
    pub fn factored_params(&self, f: usize, c: usize) -> usize {
        let (rows, cols) = self.slice_dims(f, c);
        self.rank * self.max_groups() * (rows + cols)
    }

    /// Shape-level validity against a (f, c, k, k) layer: kernel split,
    /// group rules, divisibility and the SVD rank bound. Full-rank configs
    /// pass this even when they are not cheaper than the original.
    pub fn validate_shape(&self, f: usize, c: usize, k: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("config {self:?} on ({f},{c},{k},{k}): {msg}")));
        if self.kernel0.0 * self.kernel1.0 != k || self.kernel0.1 * self.kernel1.1 != k {
            return fail("kernel split product must equal the original kernel".into());
        }
        if self.groups0.min(self.groups1) != 1 {
            return fail("at most one low-rank layer may be grouped".into());
        }
        if self.groups0 == 0 || c % self.groups0 != 0 {
            return fail(format!("groups0 {} must divide input channels {c}", self.groups0));
        }
        if self.groups1 == 0 || f % self.groups1 != 0 {
            return fail(format!("groups1 {} must divide filters {f}", self.groups1));
        }
        let (rows, cols) = self.slice_dims(f, c);
        if self.rank == 0 || self.rank > rows.min(cols) {
            return fail(format!(
                "rank {} outside [1, {}] slice bound",
                self.rank,
                rows.min(cols)
            ));
        }
        Ok(())
    }

    /// Every space constraint: shape validity plus the strict weight budget.
    pub fn validate(&self, f: usize, c: usize, k: usize) -> Result<()> {
        self.validate_shape(f, c, k)?;
        if self.factored_params(f, c) >= c * f * k * k {
            return Err(Error::Contract(format!(
                "config {self:?} on ({f},{c},{k},{k}): factored weight count must be strictly below the original"
            )));
        }
        Ok(())
    }

    /// Distribute the original stride and padding over the two low-rank
    /// layers: per spatial dimension, the layer whose kernel extent exceeds 1
    /// carries that dimension's stride and padding (the first layer carries it
    /// when both extents are 1). Returns (stride0, padding0, stride1, padding1).
    pub fn stride_padding_split(
        &self,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> ((usize, usize), (usize, usize), (usize, usize), (usize, usize)) {
        let mut s0 = (1, 1);
        let mut p0 = (0, 0);
        let mut s1 = (1, 1);
        let mut p1 = (0, 0);
        let assign = |k0: usize, k1: usize, s: usize, p: usize| -> ((usize, usize), (usize, usize)) {
            if k0 > 1 || k1 == 1 {
                ((s, p), (1, 0))
            } else {
                ((1, 0), (s, p))
            }
        };
        let ((a0, b0), (a1, b1)) = assign(self.kernel0.0, self.kernel1.0, stride.0, padding.0);
        s0.0 = a0;
        p0.0 = b0;
        s1.0 = a1;
        p1.0 = b1;
        let ((a0, b0), (a1, b1)) = assign(self.kernel0.1, self.kernel1.1, stride.1, padding.1);
        s0.1 = a0;
        p0.1 = b0;
        s1.1 = a1;
        p1.1 = b1;
        (s0, p0, s1, p1)
    }
}

/// The kernel splits considered for a k x k layer.
pub fn kernel_splits(k: usize) -> Vec<((usize, usize), (usize, usize))> {
    if k == 1 {
        vec![((1, 1), (1, 1))]
    } else {
        vec![
            ((1, 1), (k, k)),
            ((k, k), (1, 1)),
            ((k, 1), (1, k)),
            ((1, k), (k, 1)),
        ]
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// All legal configs for a (f, c, k, k) layer under the documented convention.
pub fn enumerate_space(f: usize, c: usize, k: usize) -> Vec<BlockConfig> {
    let mut out = Vec::new();
    let original = c * f * k * k;
    let mut pairs: Vec<(usize, usize)> = divisors(c).into_iter().map(|g| (g, 1)).collect();
    pairs.extend(divisors(f).into_iter().filter(|&g| g > 1).map(|g| (1, g)));
    for (kernel0, kernel1) in kernel_splits(k) {
        for &(g0, g1) in &pairs {
            let rows = (f / g1) * kernel1.0 * kernel1.1;
            let cols = (c / g0) * kernel0.0 * kernel0.1;
            let unit = g0.max(g1) * (rows + cols);
            // Strict inequality: the largest rank with rank*unit < original.
            let by_budget = (original - 1) / unit;
            let max_rank = rows.min(cols).min(by_budget);
            for rank in 1..=max_rank {
                out.push(BlockConfig {
                    kernel0,
                    kernel1,
                    groups0: g0,
                    groups1: g1,
                    rank,
                });
            }
        }
    }
    out
}

/// Calibration record for the enumeration convention (see module docs).
pub fn enumeration_notes() -> &'static str {
    "Convention: 4 kernel splits (single split when k = 1), group pairs with \
     min(g0, g1) = 1 over divisors of c and f, ranks 1..=min slice dimension \
     subject to the strict factored-weight budget. A (64, 64, 3, 3) layer \
     enumerates 1322 candidates. The published figure 74902 for that geometry \
     is not reachable per layer under the stated constraints; it corresponds \
     to this convention summed over a ResNet-18-style set of fifteen 3x3 \
     target layers (74745, residual 0.21%), so the figure is recorded as a \
     network-total calibration anchor rather than a per-layer count."
}

/// One derived branch: the config plus the two factored weights.
#[derive(Clone)]
pub struct PlannedBranch {
    pub config: BlockConfig,
    pub w0: Tensor,
    pub w1: Tensor,
}

/// 1- or 2-branch factorization plan; branch 0 approximates the weight,
/// branch 1 approximates the residual left by branch 0.
#[derive(Clone)]
pub struct BranchPlan {
    pub branches: Vec<PlannedBranch>,
}

impl BranchPlan {
    pub fn single(config: BlockConfig, w0: Tensor, w1: Tensor) -> BranchPlan {
        BranchPlan {
            branches: vec![PlannedBranch { config, w0, w1 }],
        }
    }
}

struct SliceLayout {
    c: usize,
    fs: usize,
    cs: usize,
    rows: usize,
    cols: usize,
    k0: (usize, usize),
    k1: (usize, usize),
}

fn layout(cfg: &BlockConfig, f: usize, c: usize) -> SliceLayout {
    let fs = f / cfg.groups1;
    let cs = c / cfg.groups0;
    SliceLayout {
        c,
        fs,
        cs,
        rows: fs * cfg.kernel1.0 * cfg.kernel1.1,
        cols: cs * cfg.kernel0.0 * cfg.kernel0.1,
        k0: cfg.kernel0,
        k1: cfg.kernel1,
    }
}

/// Slice indices in stacking order: (q, p) with p fastest.
fn slice_order(cfg: &BlockConfig) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(cfg.groups0 * cfg.groups1);
    for q in 0..cfg.groups1 {
        for p in 0..cfg.groups0 {
            order.push((q, p));
        }
    }
    order
}

/// Reshape one weight slice into the 2-d matrix whose SVD yields the factors:
/// rows index (filter, second-layer kernel offsets), columns index
/// (channel, first-layer kernel offsets).
fn slice_to_matrix(w: &[f32], lay: &SliceLayout, q: usize, p: usize, k: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; lay.rows * lay.cols];
    for o in 0..lay.fs {
        for u1 in 0..lay.k1.0 {
            for v1 in 0..lay.k1.1 {
                let row = (o * lay.k1.0 + u1) * lay.k1.1 + v1;
                for i in 0..lay.cs {
                    for u0 in 0..lay.k0.0 {
                        for v0 in 0..lay.k0.1 {
                            let col = (i * lay.k0.0 + u0) * lay.k0.1 + v0;
                            let src = ((q * lay.fs + o) * lay.c + (p * lay.cs + i)) * k * k
                                + (u0 + u1) * k
                                + (v0 + v1);
                            m[row * lay.cols + col] = w[src];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Derive the two low-rank weight tensors for `cfg` from a (f, c, k, k)
/// weight: slice by the group pair, reshape each slice to 2-d, truncate its
/// SVD at the config rank with sqrt(s) absorbed into both factors, reshape
/// back and stack the slices group-major.
///
/// Returns (w0, w1): w0 has shape (rank*max(g), c/g0, k0h, k0w) and feeds a
/// convolution with groups0; w1 has shape (f, mid/groups1, k1h, k1w) and
/// feeds one with groups1.
pub fn derive_weights(w: &Tensor, cfg: &BlockConfig) -> Result<(Tensor, Tensor)> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Contract(format!(
            "derive_weights expects a square 4-d weight, got {s:?}"
        )));
    }
    let (f, c, k) = (s[0], s[1], s[2]);
    cfg.validate_shape(f, c, k)?;
    let lay = layout(cfg, f, c);
    let data = w.data();
    let r = cfg.rank;
    let slices = slice_order(cfg);
    let mid = r * cfg.max_groups();

    let mut w0 = vec![0.0f32; mid * lay.cs * cfg.kernel0.0 * cfg.kernel0.1];
    let w1_cols = if cfg.groups1 == 1 { mid } else { r };
    let mut w1 = vec![0.0f32; f * w1_cols * cfg.kernel1.0 * cfg.kernel1.1];
    let k0area = cfg.kernel0.0 * cfg.kernel0.1;
    let k1area = cfg.kernel1.0 * cfg.kernel1.1;

    for (sidx, &(q, p)) in slices.iter().enumerate() {
        let m = slice_to_matrix(&data, &lay, q, p, k);
        let dec = svd(&Tensor::from_vec(&[lay.rows, lay.cols], m)?)?;
        let u = dec.u.to_vec();
        let v = dec.v.to_vec();
        let kfull = dec.s.len();
        let sqrt_s: Vec<f32> = dec.s[..r].iter().map(|s| s.max(0.0).sqrt()).collect();
        // First factor: rows of v scaled by sqrt(s) -> (r, cs, k0h, k0w).
        for rho in 0..r {
            for i in 0..lay.cs {
                for u0 in 0..cfg.kernel0.0 {
                    for v0 in 0..cfg.kernel0.1 {
                        let col = (i * cfg.kernel0.0 + u0) * cfg.kernel0.1 + v0;
                        let dst = ((sidx * r + rho) * lay.cs + i) * k0area + u0 * cfg.kernel0.1 + v0;
                        w0[dst] = sqrt_s[rho] * v[rho * lay.cols + col];
                    }
                }
            }
        }
        // Second factor: columns of u scaled by sqrt(s) -> (fs, r, k1h, k1w).
        for o in 0..lay.fs {
            for rho in 0..r {
                for u1 in 0..cfg.kernel1.0 {
                    for v1 in 0..cfg.kernel1.1 {
                        let row = (o * cfg.kernel1.0 + u1) * cfg.kernel1.1 + v1;
                        let val = sqrt_s[rho] * u[row * kfull + rho];
                        let dst = if cfg.groups1 == 1 {
                            // Stack along the input-channel dim of the second conv.
                            (o * mid + sidx * r + rho) * k1area + u1 * cfg.kernel1.1 + v1
                        } else {
                            // Stack along the output-channel dim, grouped by q.
                            ((q * lay.fs + o) * r + rho) * k1area + u1 * cfg.kernel1.1 + v1
                        };
                        w1[dst] = val;
                    }
                }
            }
        }
    }
    drop(data);
    Ok((
        Tensor::from_vec(&[mid, lay.cs, cfg.kernel0.0, cfg.kernel0.1], w0)?,
        Tensor::from_vec(&[f, w1_cols, cfg.kernel1.0, cfg.kernel1.1], w1)?,
    ))
}

fn factor_dims(cfg: &BlockConfig, w0: &Tensor, w1: &Tensor) -> Result<(usize, usize, usize)> {
    let s0 = w0.shape();
    let s1 = w1.shape();
    if s0.len() != 4 || s1.len() != 4 {
        return Err(Error::Contract("factors must be 4-d".into()));
    }
    if (s0[2], s0[3]) != cfg.kernel0 || (s1[2], s1[3]) != cfg.kernel1 {
        return Err(Error::Contract(format!(
            "factor kernels {:?}/{:?} do not match config {:?}",
            &s0[2..],
            &s1[2..],
            cfg
        )));
    }
    let mid = cfg.mid_channels();
    if s0[0] != mid {
        return Err(Error::Contract(format!(
            "first factor has {} output channels, config implies {mid}",
            s0[0]
        )));
    }
    let expect_w1_cols = if cfg.groups1 == 1 { mid } else { cfg.rank };
    if s1[1] != expect_w1_cols {
        return Err(Error::Contract(format!(
            "second factor has {} input channels per group, config implies {expect_w1_cols}",
            s1[1]
        )));
    }
    let f = s1[0];
    let c = s0[1] * cfg.groups0;
    if f % cfg.groups1 != 0 {
        return Err(Error::Contract("factor filters not divisible by groups1".into()));
    }
    let k = cfg.kernel0.0 * cfg.kernel1.0;
    if cfg.kernel0.1 * cfg.kernel1.1 != k {
        return Err(Error::Contract("config kernel split is not square".into()));
    }
    Ok((f, c, k))
}

/// Fold a factor pair back into the unique equivalent (f, c, k, k) weight:
/// convolving with the result equals the two-stage low-rank convolution for
/// every input.
pub fn reconstruct(cfg: &BlockConfig, w0: &Tensor, w1: &Tensor) -> Result<Tensor> {
    let (f, c, k) = factor_dims(cfg, w0, w1)?;
    let lay = layout(cfg, f, c);
    let r = cfg.rank;
    let mid = cfg.mid_channels();
    let d0 = w0.data();
    let d1 = w1.data();
    let k0area = cfg.kernel0.0 * cfg.kernel0.1;
    let k1area = cfg.kernel1.0 * cfg.kernel1.1;
    let mut w = vec![0.0f32; f * c * k * k];
    for (sidx, &(q, p)) in slice_order(cfg).iter().enumerate() {
        for o in 0..lay.fs {
            for u1 in 0..cfg.kernel1.0 {
                for v1 in 0..cfg.kernel1.1 {
                    for i in 0..lay.cs {
                        for u0 in 0..cfg.kernel0.0 {
                            for v0 in 0..cfg.kernel0.1 {
                                let mut acc = 0.0f64;
                                for rho in 0..r {
                                    let a = if cfg.groups1 == 1 {
                                        d1[(o * mid + sidx * r + rho) * k1area
                                            + u1 * cfg.kernel1.1
                                            + v1]
                                    } else {
                                        d1[((q * lay.fs + o) * r + rho) * k1area
                                            + u1 * cfg.kernel1.1
                                            + v1]
                                    };
                                    let b = d0[((sidx * r + rho) * lay.cs + i) * k0area
                                        + u0 * cfg.kernel0.1
                                        + v0];
                                    acc += a as f64 * b as f64;
                                }
                                let dst = ((q * lay.fs + o) * c + (p * lay.cs + i)) * k * k
                                    + (u0 + u1) * k
                                    + (v0 + v1);
                                w[dst] += acc as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[f, c, k, k], w)
}

/// The error tensor E = W - reconstruct(branch 0) injected by a plan's first
/// branch. Feeding E back into `derive_weights` realizes the residual pass.
pub fn residual_error(w: &Tensor, plan: &BranchPlan) -> Result<Tensor> {
    let b0 = plan
        .branches
        .first()
        .ok_or_else(|| Error::Contract("plan has no materialized branch".into()))?;
    let rec = reconstruct(&b0.config, &b0.w0, &b0.w1)?;
    if rec.shape() != w.shape() {
        return Err(Error::Contract(format!(
            "branch reconstruction {:?} does not match weight {:?}",
            rec.shape(),
            w.shape()
        )));
    }
    let data: Vec<f32> = w
        .data()
        .iter()
        .zip(rec.data().iter())
        .map(|(a, b)| a - b)
        .collect();
    Tensor::from_vec(w.shape(), data)
}

/// Reconstruction of a full plan: sum of per-branch reconstructions.
pub fn plan_reconstruct(plan: &BranchPlan) -> Result<Tensor> {
    let mut acc: Option<Vec<f32>> = None;
    let mut shape: Vec<usize> = Vec::new();
    for br in &plan.branches {
        let rec = reconstruct(&br.config, &br.w0, &br.w1)?;
        match &mut acc {
            None => {
                shape = rec.shape().to_vec();
                acc = Some(rec.to_vec());
            }
            Some(buf) => {
                if rec.shape() != shape.as_slice() {
                    return Err(Error::Contract("plan branches disagree on weight shape".into()));
                }
                for (a, b) in buf.iter_mut().zip(rec.data().iter()) {
                    *a += b;
                }
            }
        }
    }
    let acc = acc.ok_or_else(|| Error::Contract("empty plan".into()))?;
    Tensor::from_vec(&shape, acc)
}

/// Drop trailing singular directions of an already-derived factor pair,
/// keeping the strongest `new_rank` channels of every slice. Equivalent to
/// re-deriving at the smaller rank under the sqrt(s) split.
pub fn truncate_rank(
    cfg: &BlockConfig,
    w0: &Tensor,
    w1: &Tensor,
    new_rank: usize,
) -> Result<(BlockConfig, Tensor, Tensor)> {
    let (f, c, _) = factor_dims(cfg, w0, w1)?;
    if new_rank == 0 || new_rank > cfg.rank {
        return Err(Error::Contract(format!(
            "new rank {new_rank} outside [1, {}]",
            cfg.rank
        )));
    }
    let r_old = cfg.rank;
    let slices = cfg.max_groups();
    let lay = layout(cfg, f, c);
    let k0area = cfg.kernel0.0 * cfg.kernel0.1;
    let k1area = cfg.kernel1.0 * cfg.kernel1.1;
    let new_cfg = BlockConfig { rank: new_rank, ..*cfg };
    let mid_new = new_cfg.mid_channels();

    let d0 = w0.data();
    let inner0 = lay.cs * k0area;
    let mut n0 = vec![0.0f32; mid_new * inner0];
    for s in 0..slices {
        for rho in 0..new_rank {
            let src = (s * r_old + rho) * inner0;
            let dst = (s * new_rank + rho) * inner0;
            n0[dst..dst + inner0].copy_from_slice(&d0[src..src + inner0]);
        }
    }
    drop(d0);

    let d1 = w1.data();
    let (w1_cols_old, w1_cols_new) = if cfg.groups1 == 1 {
        (r_old * slices, mid_new)
    } else {
        (r_old, new_rank)
    };
    let mut n1 = vec![0.0f32; f * w1_cols_new * k1area];
    for o in 0..f {
        for col_new in 0..w1_cols_new {
            let col_old = if cfg.groups1 == 1 {
                let s = col_new / new_rank;
                let rho = col_new % new_rank;
                s * r_old + rho
            } else {
                col_new
            };
            let src = (o * w1_cols_old + col_old) * k1area;
            let dst = (o * w1_cols_new + col_new) * k1area;
            n1[dst..dst + k1area].copy_from_slice(&d1[src..src + k1area]);
        }
    }
    drop(d1);

    Ok((
        new_cfg,
        Tensor::from_vec(&[mid_new, lay.cs, cfg.kernel0.0, cfg.kernel0.1], n0)?,
        Tensor::from_vec(&[f, w1_cols_new, cfg.kernel1.0, cfg.kernel1.1], n1)?,
    ))
}

/// Grid pruning: for every target ratio on the gamma grid, keep the candidate
/// whose cost ratio (candidate / original) is nearest, then dedup.
pub fn prune_by_flops(
    space: &[BlockConfig],
    ratio: impl Fn(&BlockConfig) -> f64,
    gamma: (f64, f64),
    step: f64,
) -> Result<Vec<BlockConfig>> {
    let (lo, hi) = gamma;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::Contract(format!(
            "gamma grid [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"
        )));
    }
    if step <= 0.0 {
        return Err(Error::Contract("grid step must be positive".into()));
    }
    if space.is_empty() {
        return Ok(Vec::new());
    }
    let ratios: Vec<f64> = space.iter().map(&ratio).collect();
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    let mut rho = lo;
    while rho <= hi + 1e-9 {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, r) in ratios.iter().enumerate() {
            let d = (r - rho).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        keep.insert(best);
        rho += step;
    }
    Ok(keep.into_iter().map(|i| space[i]).collect())
}

/// Proxy pruning: substitute one candidate at a time into the target layer,
/// measure top-1 on the proxy set, and drop candidates whose degradation
/// exceeds `tau_pp` percentage points.
pub fn prune_by_accuracy(
    space: &[BlockConfig],
    graph: &NetworkGraph,
    layer: LayerId,
    proxy: &[(Tensor, Vec<usize>)],
    tau_pp: f64,
) -> Result<Vec<BlockConfig>> {
    let LayerKind::Conv(orig) = &graph.layer(layer)?.kind else {
        return Err(Error::Contract(format!("layer {layer} is not a convolution")));
    };
    let baseline = evaluate(graph, proxy)?.0;
    let verdicts: Vec<Result<bool>> = space
        .par_iter()
        .map(|cfg| {
            let (w0, w1) = derive_weights(&orig.weight, cfg)?;
            let plan = BranchPlan::single(*cfg, w0, w1);
            let block = BuildingBlock::from_plan(orig, &plan)?;
            let candidate_graph = graph.substitute(layer, Replacement::Block(block))?;
            let top1 = evaluate(&candidate_graph, proxy)?.0;
            Ok((baseline - top1) * 100.0 <= tau_pp)
        })
        .collect();
    let mut out = Vec::new();
    for (cfg, keep) in space.iter().zip(verdicts) {
        if keep? {
            out.push(*cfg);
        }
    }
    Ok(out)
}
