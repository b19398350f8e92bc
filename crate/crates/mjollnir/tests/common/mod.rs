//! Shared test fixtures: independent scalar oracles and a gradient-check
//! driver. Everything here is deliberately written from the mathematical
//! definitions, not by calling the library's own kernels.
#![allow(dead_code)]

use mjollnir::gradcheck::{finite_diff_check, GradCheckReport};
use mjollnir::tape::{Tape, VarId};
use mjollnir::tensor::Tensor4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha20Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor4::new(dims, data).unwrap()
}

pub fn rand_vec(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Relative closeness with an absolute floor.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn assert_tensors_close(a: &Tensor4<f64>, b: &Tensor4<f64>, tol: f64, what: &str) {
    assert_eq!(a.dims(), b.dims(), "{what}: dims differ");
    for (i, (&x, &y)) in a.data().iter().zip(b.data().iter()).enumerate() {
        assert!(
            rel_close(x, y, tol),
            "{what}: mismatch at flat index {i}: {x} vs {y}"
        );
    }
}

/// Direct six-nested-loop scalar cross-correlation, written from the
/// definition: out[b, co, oh, ow] = bias[co] +
/// sum over (ci_in_group, kh, kw) of w * x at the strided, padded position.
pub fn conv2d_oracle(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    bias: Option<&[f64]>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Tensor4<f64> {
    let [b, cin, h, wd] = x.dims();
    let [cout, cpg, kh, kw] = w.dims();
    assert_eq!(cin % groups, 0);
    assert_eq!(cpg, cin / groups);
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * padding.1 - kw) / stride.1 + 1;
    let cout_pg = cout / groups;
    let mut out = Tensor4::<f64>::zeros([b, cout, oh, ow]);
    for bi in 0..b {
        for co in 0..cout {
            let grp = co / cout_pg;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0f64;
                    for cig in 0..cpg {
                        let ci = grp * cpg + cig;
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let ih = (ohi * stride.0 + khi) as isize - padding.0 as isize;
                                let iw = (owi * stride.1 + kwi) as isize - padding.1 as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += w.at(co, cig, khi, kwi)
                                    * x.at(bi, ci, ih as usize, iw as usize);
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv[co];
                    }
                    out.set(bi, co, ohi, owi, acc);
                }
            }
        }
    }
    out
}

/// Literal squeeze-and-excitation reference: squeeze by spatial mean,
/// excitation through two dense layers with ReLU then a logistic, then
/// channel-wise rescaling.
pub fn se_oracle(x: &Tensor4<f64>, w1: &Tensor4<f64>, w2: &Tensor4<f64>) -> Tensor4<f64> {
    let [b, c, h, w] = x.dims();
    let c_red = w1.b();
    let mut out = Tensor4::<f64>::zeros(x.dims());
    for bi in 0..b {
        let mut s = vec![0.0f64; c];
        for (ci, sv) in s.iter_mut().enumerate() {
            let mut acc = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    acc += x.at(bi, ci, hi, wi);
                }
            }
            *sv = acc / (h * w) as f64;
        }
        let mut hid = vec![0.0f64; c_red];
        for (r, hv) in hid.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ci, sv) in s.iter().enumerate() {
                acc += w1.at(r, ci, 0, 0) * sv;
            }
            *hv = acc.max(0.0);
        }
        for ci in 0..c {
            let mut acc = 0.0;
            for (r, hv) in hid.iter().enumerate() {
                acc += w2.at(ci, r, 0, 0) * hv;
            }
            let e = 1.0 / (1.0 + (-acc).exp());
            for hi in 0..h {
                for wi in 0..w {
                    out.set(bi, ci, hi, wi, e * x.at(bi, ci, hi, wi));
                }
            }
        }
    }
    out
}

/// Textbook Pearson correlation via the product-moment sums
/// `(n Σxy - Σx Σy) / sqrt((n Σx² - (Σx)²)(n Σy² - (Σy)²))`.
pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        sx += x;
        sy += y;
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn rmse_oracle(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Fully scalar reference of the multi-task objective, written against the
/// plain (non-logit-stable) definitions.
pub struct LossRefConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub pos_weight: f64,
    pub w_anom: f64,
    pub epsilon: f64,
    pub threshold: f64,
}

pub fn loss_reference(
    logits: &[f64],
    mags: &[f64],
    y: &[f64],
    mask: &[f64],
    cfg: &LossRefConfig,
) -> (f64, f64, f64) {
    let mut n_valid = 0.0;
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..logits.len() {
        if mask[i] == 0.0 {
            continue;
        }
        n_valid += 1.0;
        let o = if y[i] > 0.0 { 1.0 } else { 0.0 };
        let sig = 1.0 / (1.0 + (-logits[i]).exp());
        cls += -(cfg.pos_weight * o * sig.ln() + (1.0 - o) * (1.0 - sig).ln());
        let w = if y[i] > cfg.threshold { cfg.w_anom } else { 1.0 };
        let d = (mags[i] + cfg.epsilon).ln() - (y[i] + cfg.epsilon).ln();
        reg += w * d * d;
    }
    let cls = cls / n_valid;
    let reg = reg / n_valid;
    (cfg.lambda_cls * cls + cfg.lambda_reg * reg, cls, reg)
}

/// Builds a graph twice: once on a tape for reverse-mode gradients, then
/// repeatedly inside a finite-difference sweep. `build` must return a
/// scalar variable.
pub fn gradcheck_tape(
    shapes: &[[usize; 4]],
    x0: &[f64],
    step: f64,
    tol: f64,
    build: impl Fn(&Tape<f64>, &[VarId]) -> mjollnir::Result<VarId>,
) -> GradCheckReport {
    let make = |flat: &[f64]| -> (Tape<f64>, Vec<VarId>) {
        let tape = Tape::new();
        let mut ids = Vec::new();
        let mut off = 0usize;
        for (i, d) in shapes.iter().enumerate() {
            let n: usize = d.iter().product();
            let t = Tensor4::new(*d, flat[off..off + n].to_vec()).unwrap();
            ids.push(tape.param(&format!("p{i}"), t));
            off += n;
        }
        assert_eq!(off, flat.len(), "x0 length mismatch");
        (tape, ids)
    };
    let (tape, ids) = make(x0);
    let loss = build(&tape, &ids).expect("graph build failed");
    tape.backward(loss).expect("backward failed");
    let analytic: Vec<f64> = tape
        .param_grads()
        .into_iter()
        .flat_map(|(_, g)| g.into_data())
        .collect();
    let f = |flat: &[f64]| -> mjollnir::Result<f64> {
        let (tape, ids) = make(flat);
        let loss = build(&tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };
    finite_diff_check(f, x0, &analytic, step, tol).expect("finite difference sweep failed")
}
