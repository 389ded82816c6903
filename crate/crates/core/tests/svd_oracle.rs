//! SVD against the independent Gram-matrix Jacobi eigensolver, plus the
//! truncation-energy identity.

mod common;

use common::{frob, frob_diff, gram_singular_values};
use lrnas_core::tensor::{svd, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn spectrum_matches_gram_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..20 {
        let m = rng.gen_range(2..9usize);
        let n = rng.gen_range(2..9usize);
        let a = Tensor::randn(&[m, n], &mut rng);
        let dec = svd(&a).unwrap();
        let want = gram_singular_values(&a.to_vec(), m, n);
        // The Gram oracle returns n values; the thin SVD min(m, n).
        for (i, s) in dec.s.iter().enumerate() {
            assert!(
                (*s as f64 - want[i]).abs() < 1e-5 * want[0].max(1.0),
                "case {case}: s[{i}] {s} vs oracle {}",
                want[i]
            );
        }
    }
}

#[test]
fn six_by_four_fixture_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let a = Tensor::randn(&[6, 4], &mut rng);
    let dec = svd(&a).unwrap();
    let want = gram_singular_values(&a.to_vec(), 6, 4);
    for (s, w) in dec.s.iter().zip(&want) {
        assert!((*s as f64 - w).abs() < 1e-5);
    }
}

#[test]
fn factors_are_orthonormal_and_reconstruct() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let m = rng.gen_range(2..10usize);
        let n = rng.gen_range(2..10usize);
        let k = m.min(n);
        let a = Tensor::randn(&[m, n], &mut rng);
        let dec = svd(&a).unwrap();
        let u = dec.u.to_vec();
        let v = dec.v.to_vec();
        for i in 0..k {
            for j in 0..k {
                let du: f64 = (0..m).map(|r| u[r * k + i] as f64 * u[r * k + j] as f64).sum();
                let dv: f64 = (0..n).map(|c| v[i * n + c] as f64 * v[j * n + c] as f64).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((du - want).abs() < 1e-5, "u^T u [{i}{j}] = {du}");
                assert!((dv - want).abs() < 1e-5, "v v^T [{i}{j}] = {dv}");
            }
        }
        let mut rec = vec![0.0f32; m * n];
        for r in 0..m {
            for c in 0..n {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    acc += u[r * k + kk] * dec.s[kk] * v[kk * n + c];
                }
                rec[r * n + c] = acc;
            }
        }
        let err = frob_diff(&rec, &a.to_vec()) / frob(&a.to_vec()).max(1e-12);
        assert!(err < 1e-5, "reconstruction error {err}");
    }
}

#[test]
fn truncation_error_equals_tail_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..10 {
        let m = rng.gen_range(3..9usize);
        let n = rng.gen_range(3..9usize);
        let k = m.min(n);
        let a = Tensor::randn(&[m, n], &mut rng);
        let dec = svd(&a).unwrap();
        let u = dec.u.to_vec();
        let v = dec.v.to_vec();
        for r in 1..=k {
            let mut rec = vec![0.0f32; m * n];
            for row in 0..m {
                for col in 0..n {
                    let mut acc = 0.0f32;
                    for kk in 0..r {
                        acc += u[row * k + kk] * dec.s[kk] * v[kk * n + col];
                    }
                    rec[row * n + col] = acc;
                }
            }
            let err = frob_diff(&rec, &a.to_vec());
            let tail: f64 = dec.s[r..].iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>().sqrt();
            assert!(
                (err - tail).abs() < 1e-5 * frob(&a.to_vec()).max(1.0),
                "rank {r}: error {err} vs tail {tail}"
            );
        }
    }
}

#[test]
fn sign_convention_pins_left_vectors_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let a = Tensor::randn(&[7, 5], &mut rng);
    let dec = svd(&a).unwrap();
    let u = dec.u.to_vec();
    let k = dec.s.len();
    for j in 0..k {
        let col: Vec<f32> = (0..7).map(|i| u[i * k + j]).collect();
        let max = col.iter().cloned().fold(0.0f32, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        assert!(max >= 0.0, "column {j} largest-magnitude entry {max} is negative");
    }
}
