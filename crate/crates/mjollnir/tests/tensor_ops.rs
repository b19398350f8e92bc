//! Oracle equivalence and gradient checks for the tensor primitives.

mod common;

use common::*;
use mjollnir::conv::{conv2d, ConvSpec};
use mjollnir::gradcheck::finite_diff_check;
use mjollnir::ops;
use mjollnir::tensor::Tensor4;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn conv_matches_scalar_oracle_padded() {
    let mut r = rng(101);
    let x = rand_tensor(&mut r, [1, 2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, [3, 2, 3, 3], -1.0, 1.0);
    let spec = ConvSpec {
        padding: (1, 1),
        ..ConvSpec::default()
    };
    let got = conv2d(&x, &w, None, &spec).unwrap();
    let want = conv2d_oracle(&x, &w, None, (1, 1), (1, 1), 1);
    assert_tensors_close(&got, &want, 1e-10, "conv 3x3 padded");
}

#[test]
fn conv_matches_scalar_oracle_grouped_strided_biased() {
    let mut r = rng(102);
    let x = rand_tensor(&mut r, [2, 4, 6, 7], -2.0, 2.0);
    let w = rand_tensor(&mut r, [6, 2, 3, 3], -1.0, 1.0);
    let bias = rand_vec(&mut r, 6, -0.5, 0.5);
    let bias_t = Tensor4::new([1, 6, 1, 1], bias.clone()).unwrap();
    let spec = ConvSpec {
        stride: (2, 1),
        padding: (1, 2),
        groups: 2,
    };
    let got = conv2d(&x, &w, Some(&bias_t), &spec).unwrap();
    let want = conv2d_oracle(&x, &w, Some(&bias), (2, 1), (1, 2), 2);
    assert_tensors_close(&got, &want, 1e-10, "conv grouped strided");
}

#[test]
fn conv_pointwise_fast_path_matches_oracle() {
    let mut r = rng(103);
    let x = rand_tensor(&mut r, [2, 6, 4, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, [8, 6, 1, 1], -1.0, 1.0);
    let got = conv2d(&x, &w, None, &ConvSpec::pointwise(1)).unwrap();
    let want = conv2d_oracle(&x, &w, None, (1, 1), (0, 0), 1);
    assert_tensors_close(&got, &want, 1e-10, "pointwise");

    let wg = rand_tensor(&mut r, [9, 2, 1, 1], -1.0, 1.0);
    let got = conv2d(&x, &wg, None, &ConvSpec::pointwise(3)).unwrap();
    let want = conv2d_oracle(&x, &wg, None, (1, 1), (0, 0), 3);
    assert_tensors_close(&got, &want, 1e-10, "pointwise groups=3");
}

#[test]
fn conv_is_linear_in_input() {
    let mut r = rng(104);
    let w = rand_tensor(&mut r, [3, 2, 3, 3], -1.0, 1.0);
    let x = rand_tensor(&mut r, [1, 2, 6, 6], -1.0, 1.0);
    let y = rand_tensor(&mut r, [1, 2, 6, 6], -1.0, 1.0);
    let (a, b) = (0.7, -1.3);
    let spec = ConvSpec {
        padding: (1, 1),
        ..ConvSpec::default()
    };
    let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &w, None, &spec).unwrap();
    let rhs = conv2d(&x, &w, None, &spec)
        .unwrap()
        .scale(a)
        .add(&conv2d(&y, &w, None, &spec).unwrap().scale(b))
        .unwrap();
    assert_tensors_close(&lhs, &rhs, 1e-10, "conv linearity");
}

#[test]
fn conv_is_bitwise_deterministic() {
    let mut r = rng(105);
    let x = rand_tensor(&mut r, [2, 4, 8, 9], -1.0, 1.0);
    let w = rand_tensor(&mut r, [4, 1, 3, 3], -1.0, 1.0);
    let spec = ConvSpec::depthwise_same(4, 3, 3);
    let a = conv2d(&x, &w, None, &spec).unwrap();
    let b = conv2d(&x, &w, None, &spec).unwrap();
    let bits = |t: &Tensor4<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    // f32 path too
    let xf = x.cast::<f32>();
    let wf = w.cast::<f32>();
    let af = conv2d(&xf, &wf, None, &spec).unwrap();
    let bf = conv2d(&xf, &wf, None, &spec).unwrap();
    assert_eq!(
        af.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        bf.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn layer_norm_standardizes_each_position() {
    let mut r = rng(106);
    let x = rand_tensor(&mut r, [2, 4, 3, 3], -3.0, 3.0);
    let scale = Tensor4::full([1, 4, 1, 1], 1.0);
    let shift = Tensor4::zeros([1, 4, 1, 1]);
    let y = ops::layer_norm_cf(&x, &scale, &shift, 1e-12).unwrap();
    for b in 0..2 {
        for h in 0..3 {
            for w in 0..3 {
                let vals: Vec<f64> = (0..4).map(|c| y.at(b, c, h, w)).collect();
                let mean: f64 = vals.iter().sum::<f64>() / 4.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-6, "mean {mean} at ({b},{h},{w})");
                assert!((var - 1.0).abs() < 1e-4, "var {var} at ({b},{h},{w})");
            }
        }
    }
}

#[test]
fn layer_norm_invariant_to_per_position_constant() {
    let mut r = rng(107);
    let x = rand_tensor(&mut r, [1, 5, 4, 4], -1.0, 1.0);
    let offset = rand_tensor(&mut r, [1, 1, 4, 4], -10.0, 10.0);
    // add the same constant to every channel at each position
    let shifted = Tensor4::from_fn(x.dims(), |b, c, h, w| x.at(b, c, h, w) + offset.at(0, 0, h, w));
    let scale = rand_tensor(&mut r, [1, 5, 1, 1], 0.5, 1.5);
    let shift = rand_tensor(&mut r, [1, 5, 1, 1], -0.5, 0.5);
    let y0 = ops::layer_norm_cf(&x, &scale, &shift, 1e-12).unwrap();
    let y1 = ops::layer_norm_cf(&shifted, &scale, &shift, 1e-12).unwrap();
    for (a, b) in y0.data().iter().zip(y1.data().iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn gelu_matches_quadrature_oracle() {
    // Independent route: Phi(x) computed by Simpson integration of the
    // standard normal density.
    fn phi_quadrature(x: f64) -> f64 {
        let a = 0.0;
        let n = 20_000usize;
        let hstep = (x - a) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(x);
        for i in 1..n {
            let t = a + i as f64 * hstep;
            s += if i % 2 == 1 { 4.0 * pdf(t) } else { 2.0 * pdf(t) };
        }
        0.5 + s * hstep / 3.0
    }
    for &x in &[1.0, -0.5, 2.3, 0.1] {
        let want = x * phi_quadrature(x);
        let t = Tensor4::new([1, 1, 1, 1], vec![x]).unwrap();
        let got = ops::gelu(&t).data()[0];
        assert!(
            (got - want).abs() < 1e-10,
            "gelu({x}): got {got}, quadrature {want}"
        );
    }
}

#[test]
fn avg_pool_matches_scalar_mean() {
    let mut r = rng(108);
    let x = rand_tensor(&mut r, [3, 2, 7, 5], -4.0, 4.0);
    let y = ops::global_avg_pool(&x).unwrap();
    for b in 0..3 {
        for c in 0..2 {
            let mut acc = 0.0f64;
            for h in 0..7 {
                for w in 0..5 {
                    acc += x.at(b, c, h, w);
                }
            }
            let want = acc / 35.0;
            assert!(
                rel_close(y.at(b, c, 0, 0), want, 1e-12),
                "pool mismatch at ({b},{c})"
            );
        }
    }
}

#[test]
fn finite_diff_example_from_contract() {
    // f(x) = sum x^2 at (1, 2): analytic gradient (2, 4)
    let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum());
    let rep = finite_diff_check(f, &[1.0, 2.0], &[2.0, 4.0], 1e-5, 1e-8).unwrap();
    assert!(rep.passed(), "{rep}");
}

// ---- gradient checks per operation ----

#[test]
fn gradcheck_conv2d_general() {
    let mut r = rng(201);
    let shapes = [[2usize, 4, 5, 6], [6, 2, 3, 3], [1, 6, 1, 1]];
    let x0: Vec<f64> = shapes
        .iter()
        .flat_map(|d| rand_vec(&mut r, d.iter().product(), -1.0, 1.0))
        .collect();
    let probe = rand_tensor(&mut r, [2, 6, 3, 6], -1.0, 1.0);
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let spec = ConvSpec {
            stride: (2, 1),
            padding: (1, 1),
            groups: 2,
        };
        let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), spec)?;
        let pv = tape.input(probe.clone());
        Ok(tape.sum_all(tape.mul(y, pv)?))
    });
    assert!(rep.passed(), "{rep}");
}

#[test]
fn gradcheck_conv2d_pointwise() {
    let mut r = rng(202);
    let shapes = [[1usize, 6, 3, 4], [4, 3, 1, 1]];
    let x0: Vec<f64> = shapes
        .iter()
        .flat_map(|d| rand_vec(&mut r, d.iter().product(), -1.0, 1.0))
        .collect();
    let probe = rand_tensor(&mut r, [1, 4, 3, 4], -1.0, 1.0);
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], None, ConvSpec::pointwise(2))?;
        let pv = tape.input(probe.clone());
        Ok(tape.sum_all(tape.mul(y, pv)?))
    });
    assert!(rep.passed(), "{rep}");
}

#[test]
fn gradcheck_layer_norm() {
    let mut r = rng(203);
    let shapes = [[2usize, 5, 3, 2], [1, 5, 1, 1], [1, 5, 1, 1]];
    let mut x0 = rand_vec(&mut r, 60, -2.0, 2.0);
    x0.extend(rand_vec(&mut r, 5, 0.5, 1.5)); // scale
    x0.extend(rand_vec(&mut r, 5, -0.5, 0.5)); // shift
    let probe = rand_tensor(&mut r, [2, 5, 3, 2], -1.0, 1.0);
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let y = tape.layer_norm_cf(ids[0], ids[1], ids[2], 1e-6)?;
        let pv = tape.input(probe.clone());
        Ok(tape.sum_all(tape.mul(y, pv)?))
    });
    assert!(rep.passed(), "{rep}");
}

#[test]
fn gradcheck_activations() {
    let mut r = rng(204);
    let d = [[2usize, 3, 4, 4]];
    // keep away from the ReLU kink
    let x0: Vec<f64> = rand_vec(&mut r, 96, 0.15, 2.0)
        .into_iter()
        .zip(rand_vec(&mut r, 96, 0.0, 1.0))
        .map(|(v, s)| if s > 0.5 { v } else { -v })
        .collect();
    let probe = rand_tensor(&mut r, [2, 3, 4, 4], -1.0, 1.0);
    for name in ["gelu", "relu", "sigmoid", "softplus"] {
        let probe = probe.clone();
        let rep = gradcheck_tape(&d, &x0, STEP, TOL, move |tape, ids| {
            let y = match name {
                "gelu" => tape.gelu(ids[0]),
                "relu" => tape.relu(ids[0]),
                "sigmoid" => tape.sigmoid(ids[0]),
                _ => tape.softplus(ids[0]),
            };
            let pv = tape.input(probe.clone());
            Ok(tape.sum_all(tape.mul(y, pv)?))
        });
        assert!(rep.passed(), "{name}: {rep}");
    }
}

#[test]
fn gradcheck_elementwise_and_bcast() {
    let mut r = rng(205);
    let shapes = [[2usize, 3, 2, 2], [2, 3, 2, 2], [1, 3, 1, 1], [2, 1, 1, 1]];
    let x0: Vec<f64> = shapes
        .iter()
        .flat_map(|d| rand_vec(&mut r, d.iter().product(), -1.5, 1.5))
        .collect();
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let s = tape.add(ids[0], ids[1])?;
        let m = tape.mul(s, ids[0])?;
        let sc = tape.scale(m, -0.37);
        let g1 = tape.mul_bcast(sc, ids[2])?; // per-channel
        let g2 = tape.mul_bcast(g1, ids[3])?; // per-sample
        Ok(tape.sum_all(g2))
    });
    assert!(rep.passed(), "{rep}");
}

#[test]
fn gradcheck_pool_split_concat_upsample() {
    let mut r = rng(206);
    let shapes = [[2usize, 6, 4, 6]];
    let x0 = rand_vec(&mut r, 2 * 6 * 4 * 6, -1.0, 1.0);
    let probe = rand_tensor(&mut r, [2, 6, 6, 9], -1.0, 1.0);
    let probe_pool = rand_tensor(&mut r, [2, 6, 1, 1], -1.0, 1.0);
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let parts = tape.split_channels(ids[0], &[2, 1, 3])?;
        let rejoined = tape.concat_channels(&[parts[2], parts[0], parts[1]])?;
        let up = tape.upsample_bilinear(rejoined, 6, 9)?;
        let pv = tape.input(probe.clone());
        let a = tape.sum_all(tape.mul(up, pv)?);
        let pooled = tape.global_avg_pool(ids[0])?;
        let qv = tape.input(probe_pool.clone());
        let b = tape.sum_all(tape.mul(pooled, qv)?);
        tape.add(a, b)
    });
    assert!(rep.passed(), "{rep}");
}

#[test]
fn gradcheck_downsample_bilinear() {
    let mut r = rng(207);
    let shapes = [[1usize, 2, 8, 10]];
    let x0 = rand_vec(&mut r, 160, -1.0, 1.0);
    let probe = rand_tensor(&mut r, [1, 2, 3, 4], -1.0, 1.0);
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let down = tape.upsample_bilinear(ids[0], 3, 4)?;
        let pv = tape.input(probe.clone());
        Ok(tape.sum_all(tape.mul(down, pv)?))
    });
    assert!(rep.passed(), "{rep}");
}

#[test]
fn gradcheck_masked_losses() {
    let mut r = rng(208);
    let d = [2usize, 1, 3, 4];
    let n = 24;
    let shapes = [d, d];
    let mut x0 = rand_vec(&mut r, n, -2.0, 2.0); // logits
    x0.extend(rand_vec(&mut r, n, 0.05, 3.0)); // magnitudes (positive)
    let mut mr = rng(209);
    let occ = Tensor4::from_fn(d, |_, _, _, _| if mr.random::<f64>() > 0.5 { 1.0 } else { 0.0 });
    let mask = Tensor4::from_fn(d, |_, _, h, w| if (h + w) % 3 == 0 { 0.0 } else { 1.0 });
    let y = rand_tensor(&mut mr, d, 0.0, 4.0);
    let weights = Tensor4::from_fn(d, |b, c, h, w| if y.at(b, c, h, w) > 3.0 { 5.0 } else { 1.0 });
    let rep = gradcheck_tape(&shapes, &x0, STEP, TOL, |tape, ids| {
        let cls = tape.masked_bce_logits(ids[0], &occ, &mask, 5.0)?;
        let reg = tape.masked_log_mse(ids[1], &y, &mask, &weights, 1e-3)?;
        tape.add(tape.scale(cls, 1.0), tape.scale(reg, 1.0))
    });
    assert!(rep.passed(), "{rep}");
}
