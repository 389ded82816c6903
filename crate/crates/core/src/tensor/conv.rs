//! Direct grouped 2-D convolution (cross-correlation) and pooling.
//!
//! Kernels parallelize over independent output planes only, so results are
//! bitwise deterministic regardless of thread count.

use rayon::prelude::*;

use super::{OpKind, Tensor};
use crate::error::{Error, Result};

pub(crate) fn conv_out_extent(inp: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return Err(Error::Dimension(format!(
            "kernel extent {k} exceeds padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Grouped 2-D cross-correlation over an NCHW batch.
///
/// `weight` is (F, C/groups, kh, kw); output spatial extents follow
/// `floor((in + 2*pad - k) / stride) + 1`. Differentiable in `input`,
/// `weight` and `bias`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<Tensor> {
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d expects NCHW input and FCKK weight, got {xs:?} and {ws:?}"
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if groups == 0 || c % groups != 0 || f % groups != 0 {
        return Err(Error::Dimension(format!(
            "groups {groups} must divide channels {c} and filters {f}"
        )));
    }
    if wc != c / groups {
        return Err(Error::Dimension(format!(
            "weight channel extent {wc} != input channels {c} / groups {groups}"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} != [{f}]",
                b.shape()
            )));
        }
    }
    let oh = conv_out_extent(h, padding.0, kh, stride.0)?;
    let ow = conv_out_extent(w, padding.1, kw, stride.1)?;

    let x = input.data();
    let wt = weight.data();
    let fpg = f / groups;
    let cpg = c / groups;
    let mut out = vec![0.0f32; n * f * oh * ow];

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, oplane)| {
        let ni = plane / f;
        let fi = plane % f;
        let gi = fi / fpg;
        for cl in 0..cpg {
            let ci = gi * cpg + cl;
            let xplane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let wk = &wt[(fi * cpg + cl) * kh * kw..(fi * cpg + cl + 1) * kh * kw];
            for oy in 0..oh {
                let iy0 = (oy * stride.0) as isize - padding.0 as isize;
                let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                for u in 0..kh {
                    let iy = iy0 + u as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                    let wrow = &wk[u * kw..(u + 1) * kw];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix0 = (ox * stride.1) as isize - padding.1 as isize;
                        let mut acc = 0.0f32;
                        for (v, &wv) in wrow.iter().enumerate() {
                            let ix = ix0 + v as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += xrow[ix as usize] * wv;
                            }
                        }
                        *o += acc;
                    }
                }
            }
        }
    });
    drop(x);
    drop(wt);

    let out = Tensor::from_op(
        vec![n, f, oh, ow],
        out,
        OpKind::Conv2d { stride, padding, groups },
        vec![input.clone(), weight.clone()],
    );
    match bias {
        Some(b) => out.add_bias(b),
        None => Ok(out),
    }
}

pub(crate) fn conv2d_backward_input(
    gout: &[f32],
    out_shape: &[usize],
    input: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Vec<f32> {
    let xs = input.shape();
    let ws = weight.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let fpg = f / groups;
    let cpg = c / groups;
    let wt = weight.data();

    let mut gx = vec![0.0f32; n * c * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, gxplane)| {
        let ni = plane / c;
        let ci = plane % c;
        let gi = ci / cpg;
        let cl = ci % cpg;
        for fl in 0..fpg {
            let fi = gi * fpg + fl;
            let gplane = &gout[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            let wk = &wt[(fi * cpg + cl) * kh * kw..(fi * cpg + cl + 1) * kh * kw];
            for oy in 0..oh {
                let iy0 = (oy * stride.0) as isize - padding.0 as isize;
                let grow = &gplane[oy * ow..(oy + 1) * ow];
                for u in 0..kh {
                    let iy = iy0 + u as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let gxrow = &mut gxplane[iy as usize * w..(iy as usize + 1) * w];
                    let wrow = &wk[u * kw..(u + 1) * kw];
                    for (ox, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride.1) as isize - padding.1 as isize;
                        for (v, &wv) in wrow.iter().enumerate() {
                            let ix = ix0 + v as isize;
                            if ix >= 0 && ix < w as isize {
                                gxrow[ix as usize] += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv2d_backward_weight(
    gout: &[f32],
    out_shape: &[usize],
    input: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Vec<f32> {
    let xs = input.shape();
    let ws = weight.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let fpg = f / groups;
    let cpg = c / groups;
    let x = input.data();

    let mut gw = vec![0.0f32; f * cpg * kh * kw];
    gw.par_chunks_mut(cpg * kh * kw).enumerate().for_each(|(fi, gwf)| {
        let gi = fi / fpg;
        for ni in 0..n {
            let gplane = &gout[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            for cl in 0..cpg {
                let ci = gi * cpg + cl;
                let xplane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let gwk = &mut gwf[cl * kh * kw..(cl + 1) * kh * kw];
                for oy in 0..oh {
                    let iy0 = (oy * stride.0) as isize - padding.0 as isize;
                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                    for u in 0..kh {
                        let iy = iy0 + u as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let ix0 = (ox * stride.1) as isize - padding.1 as isize;
                            for v in 0..kw {
                                let ix = ix0 + v as isize;
                                if ix >= 0 && ix < w as isize {
                                    gwk[u * kw + v] += gv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

pub fn max_pool2d(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("max_pool2d expects NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = conv_out_extent(h, 0, kernel.0, stride.0)?;
    let ow = conv_out_extent(w, 0, kernel.1, stride.1)?;
    let x = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut indices = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let xplane = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for u in 0..kernel.0 {
                    for v in 0..kernel.1 {
                        let idx = (oy * stride.0 + u) * w + ox * stride.1 + v;
                        if xplane[idx] > best {
                            best = xplane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = best;
                indices[plane * oh * ow + oy * ow + ox] = plane * h * w + best_idx;
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        OpKind::MaxPool { kernel, stride, indices },
        vec![input.clone()],
    ))
}

pub fn avg_pool2d(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("avg_pool2d expects NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = conv_out_extent(h, 0, kernel.0, stride.0)?;
    let ow = conv_out_extent(w, 0, kernel.1, stride.1)?;
    let area = (kernel.0 * kernel.1) as f32;
    let x = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let xplane = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                for u in 0..kernel.0 {
                    for v in 0..kernel.1 {
                        sum += xplane[(oy * stride.0 + u) * w + ox * stride.1 + v];
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = sum / area;
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        OpKind::AvgPool { kernel, stride },
        vec![input.clone()],
    ))
}

/// NCHW -> (N, C) spatial average.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("global_avg_pool expects NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let area = (h * w) as f32;
    let x = input.data();
    let mut out = vec![0.0f32; n * c];
    for plane in 0..n * c {
        let xplane = &x[plane * h * w..(plane + 1) * h * w];
        out[plane] = xplane.iter().sum::<f32>() / area;
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![n, c],
        out,
        OpKind::GlobalAvgPool,
        vec![input.clone()],
    ))
}
