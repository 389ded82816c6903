//! conv2d against the direct nested-loop reference over the whole
//! configuration grid the engine must support.

mod common;

use common::{naive_conv2d, rel_err};
use lrnas_core::tensor::{conv2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_grouped_conv_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = Tensor::randn(&[1, 4, 5, 5], &mut rng);
    let w = Tensor::randn(&[6, 2, 3, 3], &mut rng);
    let y = conv2d(&x, &w, None, (1, 1), (0, 0), 2).unwrap();
    let (want, ws) = naive_conv2d(
        &x.to_vec(),
        (1, 4, 5, 5),
        &w.to_vec(),
        (6, 2, 3, 3),
        None,
        (1, 1),
        (0, 0),
        2,
    );
    assert_eq!(y.shape(), &[ws.0, ws.1, ws.2, ws.3]);
    assert!(rel_err(&y.to_vec(), &want) < 1e-5);
}

#[test]
fn fifty_random_configurations_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let kernels = [(1usize, 1usize), (3, 3), (3, 1), (1, 3)];
    for case in 0..50 {
        let groups = [1usize, 2, 4][case % 3];
        let stride = [(1usize, 1usize), (2, 2)][(case / 3) % 2];
        let (kh, kw) = kernels[(case / 6) % 4];
        let cpg = rng.gen_range(1..4usize);
        let fpg = rng.gen_range(1..4usize);
        let c = cpg * groups;
        let f = fpg * groups;
        let n = rng.gen_range(1..3usize);
        let h = rng.gen_range(kh.max(3)..8usize);
        let w = rng.gen_range(kw.max(3)..8usize);
        let pad = (rng.gen_range(0..2usize), rng.gen_range(0..2usize));
        let with_bias = case % 2 == 0;

        let x = Tensor::randn(&[n, c, h, w], &mut rng);
        let wt = Tensor::randn(&[f, cpg, kh, kw], &mut rng);
        let bias = with_bias.then(|| Tensor::randn(&[f], &mut rng));
        let y = conv2d(&x, &wt, bias.as_ref(), stride, pad, groups).unwrap();
        let bias_vec = bias.as_ref().map(|b| b.to_vec());
        let (want, ws) = naive_conv2d(
            &x.to_vec(),
            (n, c, h, w),
            &wt.to_vec(),
            (f, cpg, kh, kw),
            bias_vec.as_deref(),
            stride,
            pad,
            groups,
        );
        assert_eq!(y.shape(), &[ws.0, ws.1, ws.2, ws.3], "case {case}");
        let err = rel_err(&y.to_vec(), &want);
        assert!(err < 1e-5, "case {case}: relative error {err}");
    }
}
