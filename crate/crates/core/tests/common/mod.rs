//! Shared oracles for the integration suites. Everything here is an
//! independent reference path: plain nested loops and textbook algorithms
//! that never call into the implementation they check.

#![allow(dead_code)]

use lrnas_core::tensor::Tensor;

/// Direct 7-nested-loop grouped cross-correlation, the conv2d reference.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f32],
    xs: (usize, usize, usize, usize),
    w: &[f32],
    ws: (usize, usize, usize, usize),
    bias: Option<&[f32]>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> (Vec<f32>, (usize, usize, usize, usize)) {
    let (n, c, h, wd) = xs;
    let (f, cpg, kh, kw) = ws;
    assert_eq!(cpg, c / groups);
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * padding.1 - kw) / stride.1 + 1;
    let fpg = f / groups;
    let mut out = vec![0.0f32; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            let gi = fi / fpg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|b| b[fi]).unwrap_or(0.0);
                    for cl in 0..cpg {
                        let ci = gi * cpg + cl;
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (oy * stride.0 + u) as isize - padding.0 as isize;
                                let ix = (ox * stride.1 + v) as isize - padding.1 as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((fi * cpg + cl) * kh + u) * kw + v;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (n, f, oh, ow))
}

/// MAC-counting loop: walks every output element and counts one MAC per
/// in-bounds-independent kernel tap (the cost model charges full kernels).
pub fn naive_conv_macs(
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
    groups: usize,
    oh: usize,
    ow: usize,
) -> u64 {
    let mut macs = 0u64;
    for _fi in 0..f {
        for _cl in 0..(c / groups) {
            for _u in 0..kh {
                for _v in 0..kw {
                    for _oy in 0..oh {
                        for _ox in 0..ow {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    macs
}

/// Two-sided Jacobi eigensolver on a symmetric matrix; returns eigenvalues
/// sorted descending. Used as the Gram-matrix oracle for the SVD.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..(60 * n * n).max(100) {
        // Largest off-diagonal element.
        let mut p = 0;
        let mut q = 1;
        let mut max = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                if a[i * n + j].abs() > max {
                    max = a[i * n + j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if max < 1e-14 {
            break;
        }
        let app = a[p * n + p];
        let aqq = a[q * n + q];
        let apq = a[p * n + q];
        let theta = 0.5 * (aqq - app) / apq;
        let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
        let c = 1.0 / (1.0 + t * t).sqrt();
        let s = c * t;
        for k in 0..n {
            let akp = a[k * n + p];
            let akq = a[k * n + q];
            a[k * n + p] = c * akp - s * akq;
            a[k * n + q] = s * akp + c * akq;
        }
        for k in 0..n {
            let apk = a[p * n + k];
            let aqk = a[q * n + k];
            a[p * n + k] = c * apk - s * aqk;
            a[q * n + k] = s * apk + c * aqk;
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Gram-matrix singular values of a row-major (m, n) matrix: sqrt of the
/// eigenvalues of A^T A via the Jacobi oracle.
pub fn gram_singular_values(a: &[f32], m: usize, n: usize) -> Vec<f64> {
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f64;
            for k in 0..m {
                acc += a[k * n + i] as f64 * a[k * n + j] as f64;
            }
            gram[i * n + j] = acc;
        }
    }
    jacobi_eigenvalues(gram, n)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

pub fn frob(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn frob_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn rel_err(got: &[f32], want: &[f32]) -> f64 {
    frob_diff(got, want) / frob(want).max(1e-12)
}

/// Central finite-difference gradient of `f` with respect to the leaf `x`.
pub fn finite_diff_grad(x: &Tensor, h: f32, mut f: impl FnMut() -> f32) -> Vec<f32> {
    let base = x.to_vec();
    let mut grad = vec![0.0f32; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        x.set_data(&plus);
        let fp = f() as f64;
        let mut minus = base.clone();
        minus[i] -= h;
        x.set_data(&minus);
        let fm = f() as f64;
        grad[i] = ((fp - fm) / (2.0 * h as f64)) as f32;
    }
    x.set_data(&base);
    grad
}

/// Relative error between an analytic and a finite-difference gradient.
pub fn grad_rel_err(analytic: &[f32], fd: &[f32]) -> f64 {
    frob_diff(analytic, fd) / frob(fd).max(frob(analytic)).max(1e-6)
}

/// Brute-force design-space filter: every (split, g0, g1, rank) tuple checked
/// directly against the published constraints, independent of the enumerator.
pub fn brute_force_space(f: usize, c: usize, k: usize) -> Vec<(usize, usize, usize, usize, usize, usize, usize)> {
    let splits: Vec<((usize, usize), (usize, usize))> = if k == 1 {
        vec![((1, 1), (1, 1))]
    } else {
        vec![
            ((1, 1), (k, k)),
            ((k, k), (1, 1)),
            ((k, 1), (1, k)),
            ((1, k), (k, 1)),
        ]
    };
    let mut out = Vec::new();
    for (k0, k1) in splits {
        for g0 in 1..=c {
            for g1 in 1..=f {
                if c % g0 != 0 || f % g1 != 0 {
                    continue;
                }
                if g0.min(g1) != 1 {
                    continue;
                }
                let rows = (f / g1) * k1.0 * k1.1;
                let cols = (c / g0) * k0.0 * k0.1;
                for rank in 1..=rows.min(cols) {
                    let weights = rank * g0.max(g1) * (rows + cols);
                    if weights >= c * f * k * k {
                        continue;
                    }
                    out.push((k0.0, k0.1, k1.0, k1.1, g0, g1, rank));
                }
            }
        }
    }
    out
}
