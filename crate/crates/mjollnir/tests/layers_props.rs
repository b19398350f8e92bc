//! Oracle and property tests for the composite layers.

mod common;

use common::*;
use mjollnir::fwd::Fwd;
use mjollnir::gradcheck::finite_diff_check;
use mjollnir::layers::{
    drop_path, inception_dwconv, mjolnir_block, se_block, BlockParams, InceptionDwParams,
    SeParams,
};
use mjollnir::tape::Tape;
use mjollnir::tensor::Tensor4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn inception_matches_per_branch_conv_oracle() {
    let mut r = rng(301);
    let mut p = InceptionDwParams::<f64>::new(8, 5).unwrap();
    assert_eq!(p.splits(), [1, 1, 1, 5]);
    p.k_h = rand_tensor(&mut r, [1, 1, 1, 5], -1.0, 1.0);
    p.k_v = rand_tensor(&mut r, [1, 1, 5, 1], -1.0, 1.0);
    p.k_sq = rand_tensor(&mut r, [1, 1, 3, 3], -1.0, 1.0);
    let x = rand_tensor(&mut r, [1, 8, 6, 6], -1.0, 1.0);

    let mut cx = Fwd::eager();
    let bound = p.bind(&cx, "t");
    let xv = cx.leaf(&x);
    let got = inception_dwconv(&mut cx, &xv, &bound).unwrap();
    let got = cx.tensor(&got);

    // Oracle: slice channels, convolve each branch with the scalar loop
    // reference, concatenate in (h, v, sq, id) order.
    let slice = |c0: usize, c1: usize| {
        Tensor4::from_fn([1, c1 - c0, 6, 6], |_, c, h, w| x.at(0, c0 + c, h, w))
    };
    let h_part = conv2d_oracle(&slice(0, 1), &p.k_h, None, (1, 1), (0, 2), 1);
    let v_part = conv2d_oracle(&slice(1, 2), &p.k_v, None, (1, 1), (2, 0), 1);
    let sq_part = conv2d_oracle(&slice(2, 3), &p.k_sq, None, (1, 1), (1, 1), 1);
    let want = Tensor4::from_fn([1, 8, 6, 6], |_, c, h, w| match c {
        0 => h_part.at(0, 0, h, w),
        1 => v_part.at(0, 0, h, w),
        2 => sq_part.at(0, 0, h, w),
        _ => x.at(0, c, h, w),
    });
    assert_tensors_close(&got, &want, 1e-10, "inception branches");
}

#[test]
fn inception_preserves_dims_for_legal_splits() {
    let mut r = rng(302);
    for &(c, k) in &[(8usize, 5usize), (16, 11), (24, 7), (9, 3), (4, 11)] {
        let mut p = InceptionDwParams::<f64>::new(c, k).unwrap();
        assert_eq!(p.channels(), c);
        let kdims = [p.k_h.dims(), p.k_v.dims(), p.k_sq.dims()];
        p.k_h = rand_tensor(&mut r, kdims[0], -1.0, 1.0);
        p.k_v = rand_tensor(&mut r, kdims[1], -1.0, 1.0);
        p.k_sq = rand_tensor(&mut r, kdims[2], -1.0, 1.0);
        let x = rand_tensor(&mut r, [2, c, 7, 9], -1.0, 1.0);
        let mut cx = Fwd::eager();
        let bound = p.bind(&cx, "t");
        let xv = cx.leaf(&x);
        let y = inception_dwconv(&mut cx, &xv, &bound).unwrap();
        assert_eq!(cx.tensor(&y).dims(), x.dims(), "c={c} k={k}");
    }
}

#[test]
fn se_matches_literal_reference() {
    let mut r = rng(303);
    let mut p = SeParams::<f64>::new(4, 2).unwrap();
    p.w1 = rand_tensor(&mut r, [2, 4, 1, 1], -1.5, 1.5);
    p.w2 = rand_tensor(&mut r, [4, 2, 1, 1], -1.5, 1.5);
    let x = rand_tensor(&mut r, [2, 4, 3, 3], -2.0, 2.0);
    let mut cx = Fwd::eager();
    let bound = p.bind(&cx, "se");
    let xv = cx.leaf(&x);
    let got = se_block(&mut cx, &xv, &bound).unwrap();
    let want = se_oracle(&x, &p.w1, &p.w2);
    assert_tensors_close(&cx.tensor(&got), &want, 1e-10, "se");
}

#[test]
fn se_is_a_strict_pointwise_contraction() {
    let mut r = rng(304);
    let mut p = SeParams::<f64>::new(6, 3).unwrap();
    p.w1 = rand_tensor(&mut r, [2, 6, 1, 1], -2.0, 2.0);
    p.w2 = rand_tensor(&mut r, [6, 2, 1, 1], -2.0, 2.0);
    let x = rand_tensor(&mut r, [1, 6, 4, 4], -3.0, 3.0);
    let mut cx = Fwd::eager();
    let bound = p.bind(&cx, "se");
    let xv = cx.leaf(&x);
    let y = se_block(&mut cx, &xv, &bound).unwrap();
    let y = cx.tensor(&y);
    for (&xi, &yi) in x.data().iter().zip(y.data().iter()) {
        if xi != 0.0 {
            assert!(yi.abs() < xi.abs(), "|{yi}| !< |{xi}|");
        } else {
            assert_eq!(yi, 0.0);
        }
    }
}

#[test]
fn drop_path_mask_mean_matches_bernoulli_law() {
    // p = 0.5 over 10000 samples: each kept sample contributes 1/(1-p) = 2,
    // so the per-sample scaling has mean 1 and variance 1.
    let n = 10_000usize;
    let p = 0.5;
    let tape = Tape::<f64>::new();
    let mut rng_ = ChaCha20Rng::seed_from_u64(777);
    let mut cx = Fwd::train(&tape, &mut rng_);
    let x = Tensor4::<f64>::full([n, 1, 1, 1], 1.0);
    let xv = cx.leaf(&x);
    let y = drop_path(&mut cx, &xv, p).unwrap();
    let yt = cx.tensor(&y);
    let mean = yt.data().iter().sum::<f64>() / n as f64;
    let se = (1.0f64 / n as f64).sqrt(); // variance of the scaling is 1
    assert!(
        (mean - 1.0).abs() < 3.0 * se,
        "mask mean {mean} departs from 1 by more than 3 SE ({se})"
    );
    // each entry is exactly 0 or 2
    assert!(yt.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn drop_path_is_deterministic_per_seed() {
    let draw = |seed: u64| {
        let tape = Tape::<f64>::new();
        let mut rng_ = ChaCha20Rng::seed_from_u64(seed);
        let mut cx = Fwd::train(&tape, &mut rng_);
        let x = Tensor4::<f64>::full([64, 1, 1, 1], 1.0);
        let xv = cx.leaf(&x);
        let y = drop_path(&mut cx, &xv, 0.3).unwrap();
        cx.tensor(&y).data().to_vec()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

fn random_block(r: &mut ChaCha20Rng, c: usize, se: bool) -> BlockParams<f64> {
    let mut p = BlockParams::<f64>::new(c, 5, se.then_some(2), true, 0.0, 1).unwrap();
    p.visit_mut("b", &mut |_, _, t| {
        let dims = t.dims();
        *t = Tensor4::from_fn(dims, |_, _, _, _| r.random_range(-0.8..0.8));
    });
    p
}

#[test]
fn block_se_disabled_vs_zero_se_differ_by_half_on_residual() {
    let mut r = rng(305);
    let base = random_block(&mut r, 8, false);
    let mut with_zero_se = base.clone();
    with_zero_se.se = Some(SeParams::new(8, 2).unwrap()); // zero weights
    let x = rand_tensor(&mut r, [1, 8, 5, 5], -1.0, 1.0);

    let run = |p: &BlockParams<f64>| {
        let mut cx = Fwd::eager();
        let bound = p.bind(&cx, "blk");
        let xv = cx.leaf(&x);
        let y = mjolnir_block(&mut cx, &xv, &bound).unwrap();
        cx.tensor(&y).as_ref().clone()
    };
    let y_no_se = run(&base);
    let y_zero_se = run(&with_zero_se);
    // residual branch halves: y2 - x == 0.5 (y1 - x)
    for ((&a, &b), &xi) in y_no_se
        .data()
        .iter()
        .zip(y_zero_se.data().iter())
        .zip(x.data().iter())
    {
        assert!(
            ((b - xi) - 0.5 * (a - xi)).abs() < 1e-12,
            "residual halving violated: {a} {b} {xi}"
        );
    }
}

#[test]
fn gradcheck_full_block_with_se() {
    let mut r = rng(306);
    let block = random_block(&mut r, 8, true);
    let x = rand_tensor(&mut r, [2, 8, 4, 4], -1.0, 1.0);
    let probe = rand_tensor(&mut r, [2, 8, 4, 4], -1.0, 1.0);

    // flatten (x, block params) in visitation order
    let mut x0: Vec<f64> = x.data().to_vec();
    block.visit("b", &mut |_, _, t| x0.extend(t.data()));

    let eval = |flat: &[f64]| -> (Tape<f64>, mjollnir::tape::VarId) {
        let mut blk = block.clone();
        let mut off = x.len();
        blk.visit_mut("b", &mut |_, _, t| {
            let n = t.len();
            let dims = t.dims();
            *t = Tensor4::new(dims, flat[off..off + n].to_vec()).unwrap();
            off += n;
        });
        let xt = Tensor4::new(x.dims(), flat[..x.len()].to_vec()).unwrap();
        let tape = Tape::new();
        let mut cx = Fwd::taped(&tape);
        let xv = cx.param("x", &xt);
        let bound = blk.bind(&cx, "blk");
        let y = mjolnir_block(&mut cx, &xv, &bound).unwrap();
        let pv = cx.leaf(&probe);
        let prod = cx.mul(&y, &pv).unwrap();
        let loss = cx.sum_all(&prod).unwrap();
        let loss_id = cx.var(&loss).unwrap();
        drop(cx);
        (tape, loss_id)
    };

    let (tape, loss) = eval(&x0);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = tape
        .param_grads()
        .into_iter()
        .flat_map(|(_, g)| g.into_data())
        .collect();
    assert_eq!(analytic.len(), x0.len());

    let f = |flat: &[f64]| {
        let (tape, loss) = eval(flat);
        Ok(tape.value(loss).data()[0])
    };
    let rep = finite_diff_check(f, &x0, &analytic, 1e-5, 1e-4).unwrap();
    assert!(rep.passed(), "{rep}");
}
