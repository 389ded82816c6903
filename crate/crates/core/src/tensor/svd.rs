//! Thin singular value decomposition via one-sided Jacobi rotations.
//!
//! Internals run in f64; results are cast back to f32. The sign convention is
//! fixed so repeated runs on the same matrix are bit-identical: the
//! largest-magnitude entry of each left singular vector is non-negative.

use super::Tensor;
use crate::error::{Error, Result};

/// Thin SVD `a = u * diag(s) * v` with `u` (m, k), `s` descending, `v` (k, n),
/// k = min(m, n).
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f32>,
    pub v: Tensor,
}

const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

pub fn svd(matrix: &Tensor) -> Result<SvdResult> {
    let shape = matrix.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("svd expects a matrix, got {shape:?}")));
    }
    let (m, n) = (shape[0], shape[1]);
    let data = matrix.to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("svd input contains non-finite values".into()));
    }
    let a: Vec<f64> = data.iter().map(|&v| v as f64).collect();

    if m >= n {
        let (u, s, v) = jacobi_tall(&a, m, n);
        finish(u, s, v, m, n)
    } else {
        // Work on the transpose and swap factors back.
        let mut at = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let (ut, s, vt) = jacobi_tall(&at, n, m);
        // a^T = ut s vt  =>  a = vt^T s ut^T
        let k = m.min(n);
        let mut u = vec![0.0f64; m * k];
        for i in 0..m {
            for j in 0..k {
                u[i * k + j] = vt[j * m + i];
            }
        }
        let mut v = vec![0.0f64; k * n];
        for i in 0..k {
            for j in 0..n {
                v[i * n + j] = ut[j * k + i];
            }
        }
        finish(u, s, v, m, n)
    }
}

/// One-sided Jacobi on a tall (m >= n) matrix given row-major.
/// Returns (u: m*n, s: n, v: n*n row-major with v[i*n+j] = V^T entries),
/// i.e. a = u * diag(s) * v.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Column-major working copy for cheap column rotations.
    let mut cols = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            cols[j * m + i] = a[i * n + j];
        }
    }
    // Right accumulator, column-major: column j holds the right singular vector.
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (cp, cq) = (p * m, q * m);
                let mut alpha = 0.0f64;
                let mut beta = 0.0f64;
                let mut gamma = 0.0f64;
                for i in 0..m {
                    let ap = cols[cp + i];
                    let aq = cols[cq + i];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let ap = cols[cp + i];
                    let aq = cols[cq + i];
                    cols[cp + i] = c * ap - s * aq;
                    cols[cq + i] = s * ap + c * aq;
                }
                for i in 0..n {
                    let vp = v[p * n + i];
                    let vq = v[q * n + i];
                    v[p * n + i] = c * vp - s * vq;
                    v[q * n + i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms; normalize to get U.
    let mut s: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| cols[j * m + i] * cols[j * m + i]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap().then(i.cmp(&j)));

    let mut u = vec![0.0f64; m * n];
    let mut vt = vec![0.0f64; n * n];
    let mut s_sorted = vec![0.0f64; n];
    let mut filled: Vec<bool> = vec![false; n];
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = s[src];
        if s[src] > 0.0 {
            for i in 0..m {
                u[i * n + dst] = cols[src * m + i] / s[src];
            }
            filled[dst] = true;
        }
        for j in 0..n {
            vt[dst * n + j] = v[src * n + j];
        }
    }
    s = s_sorted;

    // Orthonormal completion for zero singular values (rank-deficient input):
    // Gram-Schmidt standard basis vectors against the filled columns.
    for dst in 0..n {
        if filled[dst] {
            continue;
        }
        'basis: for e in 0..m {
            let mut cand = vec![0.0f64; m];
            cand[e] = 1.0;
            for j in 0..n {
                if j == dst || !filled[j] {
                    continue;
                }
                let dot: f64 = (0..m).map(|i| cand[i] * u[i * n + j]).sum();
                for i in 0..m {
                    cand[i] -= dot * u[i * n + j];
                }
            }
            let norm: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.5 {
                for i in 0..m {
                    u[i * n + dst] = cand[i] / norm;
                }
                filled[dst] = true;
                break 'basis;
            }
        }
    }

    (u, s, vt)
}

fn finish(mut u: Vec<f64>, s: Vec<f64>, mut v: Vec<f64>, m: usize, n: usize) -> Result<SvdResult> {
    let k = m.min(n);
    // Sign convention: largest-magnitude entry of each left singular vector
    // is non-negative (first index wins ties).
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..m {
            let a = u[i * k + j].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u[best * k + j] < 0.0 {
            for i in 0..m {
                u[i * k + j] = -u[i * k + j];
            }
            for i in 0..n {
                v[j * n + i] = -v[j * n + i];
            }
        }
    }
    let u = Tensor::from_vec(&[m, k], u.iter().map(|&v| v as f32).collect())?;
    let v = Tensor::from_vec(&[k, n], v.iter().map(|&v| v as f32).collect())?;
    Ok(SvdResult {
        u,
        s: s.iter().map(|&v| v as f32).collect(),
        v,
    })
}
