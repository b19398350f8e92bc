//! Non-convolution tensor kernels: normalization, activations, pooling,
//! broadcast multiply, channel split/concat, bilinear resize.
//!
//! Every reduction accumulates in `f64` over a fixed sequential order so
//! results are bit-reproducible. Each forward kernel has a matching
//! backward kernel used by the tape.

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor4;

fn check_affine<T: Scalar>(op: &'static str, x: &Tensor4<T>, v: &Tensor4<T>) -> Result<()> {
    if v.dims() != [1, x.c(), 1, 1] {
        return Err(Error::Dim {
            op,
            axis: "channels",
            expected: x.c(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Layer normalization over the channel axis (channels-first layout).
///
/// At each `(b, h, w)` position the C channel values are standardized to
/// zero mean and unit variance (population variance, `eps` inside the
/// square root), then scaled and shifted per channel.
pub fn layer_norm_cf<T: Scalar>(
    x: &Tensor4<T>,
    scale: &Tensor4<T>,
    shift: &Tensor4<T>,
    eps: f64,
) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.dims();
    if c == 0 {
        return Err(Error::Dim {
            op: "layer_norm_cf",
            axis: "channels",
            expected: 1,
            got: 0,
        });
    }
    check_affine("layer_norm_cf", x, scale)?;
    check_affine("layer_norm_cf", x, shift)?;
    let mut out = Tensor4::<T>::zeros([b, c, h, w]);
    let inv_c = 1.0 / c as f64;
    let mut mean = vec![0.0f64; w];
    let mut var = vec![0.0f64; w];
    for bi in 0..b {
        for hi in 0..h {
            mean.fill(0.0);
            var.fill(0.0);
            for ci in 0..c {
                let row = &x.plane(bi, ci)[hi * w..(hi + 1) * w];
                for (m, &v) in mean.iter_mut().zip(row.iter()) {
                    *m += v.to_f64();
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_c;
            }
            for ci in 0..c {
                let row = &x.plane(bi, ci)[hi * w..(hi + 1) * w];
                for ((vv, &xv), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                    let d = xv.to_f64() - m;
                    *vv += d * d;
                }
            }
            for ci in 0..c {
                let g = scale.data()[ci].to_f64();
                let s = shift.data()[ci].to_f64();
                let xrow_start = hi * w;
                for wi in 0..w {
                    let xv = x.plane(bi, ci)[xrow_start + wi].to_f64();
                    let inv_std = 1.0 / libm::sqrt(var[wi] * inv_c + eps);
                    let y = (xv - mean[wi]) * inv_std * g + s;
                    let oi = out.idx(bi, ci, hi, wi);
                    out.data_mut()[oi] = T::from_f64(y);
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`layer_norm_cf`]; returns `(grad_x, grad_scale, grad_shift)`.
pub fn layer_norm_cf_backward<T: Scalar>(
    x: &Tensor4<T>,
    scale: &Tensor4<T>,
    gout: &Tensor4<T>,
    eps: f64,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let [b, c, h, w] = x.dims();
    let inv_c = 1.0 / c as f64;
    let mut gx = Tensor4::<T>::zeros([b, c, h, w]);
    let mut gscale = vec![0.0f64; c];
    let mut gshift = vec![0.0f64; c];
    let mut mean = vec![0.0f64; w];
    let mut var = vec![0.0f64; w];
    let mut s_a = vec![0.0f64; w]; // sum_c of a = g*gy
    let mut s_ax = vec![0.0f64; w]; // sum_c of a * xhat
    for bi in 0..b {
        for hi in 0..h {
            mean.fill(0.0);
            var.fill(0.0);
            s_a.fill(0.0);
            s_ax.fill(0.0);
            for ci in 0..c {
                let row = &x.plane(bi, ci)[hi * w..(hi + 1) * w];
                for (m, &v) in mean.iter_mut().zip(row.iter()) {
                    *m += v.to_f64();
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_c;
            }
            for ci in 0..c {
                let row = &x.plane(bi, ci)[hi * w..(hi + 1) * w];
                for ((vv, &xv), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                    let d = xv.to_f64() - m;
                    *vv += d * d;
                }
            }
            for ci in 0..c {
                let g = scale.data()[ci].to_f64();
                let xrow = &x.plane(bi, ci)[hi * w..(hi + 1) * w];
                let grow = &gout.plane(bi, ci)[hi * w..(hi + 1) * w];
                for wi in 0..w {
                    let inv_std = 1.0 / libm::sqrt(var[wi] * inv_c + eps);
                    let xhat = (xrow[wi].to_f64() - mean[wi]) * inv_std;
                    let gy = grow[wi].to_f64();
                    let a = g * gy;
                    s_a[wi] += a;
                    s_ax[wi] += a * xhat;
                    gscale[ci] += gy * xhat;
                    gshift[ci] += gy;
                }
            }
            for ci in 0..c {
                let g = scale.data()[ci].to_f64();
                let xrow_start = hi * w;
                for wi in 0..w {
                    let inv_std = 1.0 / libm::sqrt(var[wi] * inv_c + eps);
                    let xhat = (x.plane(bi, ci)[xrow_start + wi].to_f64() - mean[wi]) * inv_std;
                    let gy = gout.plane(bi, ci)[xrow_start + wi].to_f64();
                    let v = inv_std * (g * gy - s_a[wi] * inv_c - xhat * s_ax[wi] * inv_c);
                    let gi = gx.idx(bi, ci, hi, wi);
                    gx.data_mut()[gi] = T::from_f64(v);
                }
            }
        }
    }
    let gscale_t =
        Tensor4::new([1, c, 1, 1], gscale.iter().map(|&v| T::from_f64(v)).collect()).unwrap();
    let gshift_t =
        Tensor4::new([1, c, 1, 1], gshift.iter().map(|&v| T::from_f64(v)).collect()).unwrap();
    (gx, gscale_t, gshift_t)
}

pub fn gelu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(scalar::gelu(v.to_f64())))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor4<T>, gout: &Tensor4<T>) -> Tensor4<T> {
    elementwise_bwd(x, gout, scalar::gelu_grad)
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v.to_f64() > 0.0 { v } else { T::ZERO })
}

pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, gout: &Tensor4<T>) -> Tensor4<T> {
    elementwise_bwd(x, gout, |v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(scalar::sigmoid(v.to_f64())))
}

pub fn sigmoid_backward<T: Scalar>(x: &Tensor4<T>, gout: &Tensor4<T>) -> Tensor4<T> {
    elementwise_bwd(x, gout, |v| {
        let s = scalar::sigmoid(v);
        s * (1.0 - s)
    })
}

pub fn softplus<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::from_f64(scalar::softplus(v.to_f64())))
}

pub fn softplus_backward<T: Scalar>(x: &Tensor4<T>, gout: &Tensor4<T>) -> Tensor4<T> {
    elementwise_bwd(x, gout, scalar::sigmoid)
}

fn elementwise_bwd<T: Scalar>(
    x: &Tensor4<T>,
    gout: &Tensor4<T>,
    dfdx: impl Fn(f64) -> f64,
) -> Tensor4<T> {
    debug_assert!(x.same_dims(gout));
    let data = x
        .data()
        .iter()
        .zip(gout.data().iter())
        .map(|(&xv, &gv)| T::from_f64(gv.to_f64() * dfdx(xv.to_f64())))
        .collect();
    Tensor4::new(x.dims(), data).unwrap()
}

/// Mean over the spatial extent, yielding a `(B, C, 1, 1)` tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.dims();
    if h * w == 0 {
        return Err(Error::Dim {
            op: "global_avg_pool",
            axis: "spatial",
            expected: 1,
            got: 0,
        });
    }
    let inv = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(b * c);
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0f64;
            for &v in x.plane(bi, ci) {
                acc += v.to_f64();
            }
            out.push(T::from_f64(acc * inv));
        }
    }
    Tensor4::new([b, c, 1, 1], out)
}

pub fn global_avg_pool_backward<T: Scalar>(xdims: [usize; 4], gout: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = xdims;
    let inv = 1.0 / (h * w) as f64;
    let mut gx = Tensor4::<T>::zeros(xdims);
    for bi in 0..b {
        for ci in 0..c {
            let gv = T::from_f64(gout.at(bi, ci, 0, 0).to_f64() * inv);
            for v in gx.plane_mut(bi, ci) {
                *v = gv;
            }
        }
    }
    gx
}

fn check_bcast<T: Scalar>(x: &Tensor4<T>, m: &Tensor4<T>) -> Result<()> {
    let [mb, mc, mh, mw] = m.dims();
    let ok = (mb == 1 || mb == x.b()) && (mc == 1 || mc == x.c()) && mh == 1 && mw == 1;
    if !ok {
        return Err(Error::Shape {
            op: "mul_bcast",
            msg: format!(
                "multiplier {:?} does not broadcast over {:?} (want (B|1, C|1, 1, 1))",
                m.dims(),
                x.dims()
            ),
        });
    }
    Ok(())
}

/// Multiplies `x` by a `(B|1, C|1, 1, 1)` tensor broadcast over the
/// remaining axes. Covers channel gating, layer scale, and per-sample masks.
pub fn mul_bcast<T: Scalar>(x: &Tensor4<T>, m: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_bcast(x, m)?;
    let [b, c, _, _] = x.dims();
    let [mb, mc, _, _] = m.dims();
    let mut out = Tensor4::<T>::zeros(x.dims());
    for bi in 0..b {
        for ci in 0..c {
            let mv = m
                .at(if mb == 1 { 0 } else { bi }, if mc == 1 { 0 } else { ci }, 0, 0)
                .to_f64();
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = T::from_f64(s.to_f64() * mv);
            }
        }
    }
    Ok(out)
}

/// Backward of [`mul_bcast`]; returns `(grad_x, grad_m)`.
pub fn mul_bcast_backward<T: Scalar>(
    x: &Tensor4<T>,
    m: &Tensor4<T>,
    gout: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let [b, c, _, _] = x.dims();
    let [mb, mc, _, _] = m.dims();
    let mut gx = Tensor4::<T>::zeros(x.dims());
    let mut gm = vec![0.0f64; m.len()];
    for bi in 0..b {
        for ci in 0..c {
            let mi = (if mb == 1 { 0 } else { bi }) * mc + if mc == 1 { 0 } else { ci };
            let mv = m.data()[mi].to_f64();
            let xp = x.plane(bi, ci);
            let gp = gout.plane(bi, ci);
            let dst = gx.plane_mut(bi, ci);
            let mut acc = 0.0f64;
            for ((d, &xv), &gv) in dst.iter_mut().zip(xp.iter()).zip(gp.iter()) {
                let g = gv.to_f64();
                *d = T::from_f64(g * mv);
                acc += g * xv.to_f64();
            }
            gm[mi] += acc;
        }
    }
    let gm_t = Tensor4::new(m.dims(), gm.iter().map(|&v| T::from_f64(v)).collect()).unwrap();
    (gx, gm_t)
}

/// Splits the channel axis into contiguous groups of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let [b, c, h, w] = x.dims();
    let total: usize = sizes.iter().sum();
    if total != c {
        return Err(Error::Dim {
            op: "split_channels",
            axis: "channels",
            expected: c,
            got: total,
        });
    }
    let mut parts = Vec::with_capacity(sizes.len());
    let mut c0 = 0;
    for &n in sizes {
        let mut part = Tensor4::<T>::zeros([b, n, h, w]);
        for bi in 0..b {
            for ci in 0..n {
                part.plane_mut(bi, ci).copy_from_slice(x.plane(bi, c0 + ci));
            }
        }
        parts.push(part);
        c0 += n;
    }
    Ok(parts)
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    if parts.is_empty() {
        return Err(Error::Shape {
            op: "concat_channels",
            msg: "no inputs".into(),
        });
    }
    let [b, _, h, w] = parts[0].dims();
    for p in parts {
        if p.b() != b || p.h() != h || p.w() != w {
            return Err(Error::Shape {
                op: "concat_channels",
                msg: format!("incompatible shapes {:?} vs {:?}", parts[0].dims(), p.dims()),
            });
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Tensor4::<T>::zeros([b, c, h, w]);
    let mut c0 = 0;
    for p in parts {
        for bi in 0..b {
            for ci in 0..p.c() {
                out.plane_mut(bi, c0 + ci).copy_from_slice(p.plane(bi, ci));
            }
        }
        c0 += p.c();
    }
    Ok(out)
}

/// Bilinear resize to `(oh, ow)` with half-pixel centers (no corner alignment).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor4<T>, oh: usize, ow: usize) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.dims();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "upsample_bilinear",
            msg: "spatial extents must be positive".into(),
        });
    }
    let mut out = Tensor4::<T>::zeros([b, c, oh, ow]);
    let coords_h = bilinear_coords(h, oh);
    let coords_w = bilinear_coords(w, ow);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (ohi, &(y0, y1, fy)) in coords_h.iter().enumerate() {
                for (owi, &(x0, x1, fx)) in coords_w.iter().enumerate() {
                    let v00 = src[y0 * w + x0].to_f64();
                    let v01 = src[y0 * w + x1].to_f64();
                    let v10 = src[y1 * w + x0].to_f64();
                    let v11 = src[y1 * w + x1].to_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    dst[ohi * ow + owi] = T::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Scalar>(
    xdims: [usize; 4],
    gout: &Tensor4<T>,
) -> Tensor4<T> {
    let [b, c, h, w] = xdims;
    let [_, _, oh, ow] = gout.dims();
    let coords_h = bilinear_coords(h, oh);
    let coords_w = bilinear_coords(w, ow);
    let mut acc = vec![0.0f64; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let gplane = gout.plane(bi, ci);
            let base = (bi * c + ci) * h * w;
            for (ohi, &(y0, y1, fy)) in coords_h.iter().enumerate() {
                for (owi, &(x0, x1, fx)) in coords_w.iter().enumerate() {
                    let g = gplane[ohi * ow + owi].to_f64();
                    acc[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    acc[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                    acc[base + y1 * w + x0] += g * fy * (1.0 - fx);
                    acc[base + y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    Tensor4::new(xdims, acc.iter().map(|&v| T::from_f64(v)).collect()).unwrap()
}

/// Source indices and fractional weight for each destination index.
fn bilinear_coords(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let f = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor4::<f64>::full([1, 4, 2, 2], 3.25);
        let scale = Tensor4::full([1, 4, 1, 1], 1.0);
        let shift = Tensor4::zeros([1, 4, 1, 1]);
        let y = layer_norm_cf(&x, &scale, &shift, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_two_channel_analytic() {
        // channels (0, 2): mean 1, population std 1 -> (-1, 1) as eps -> 0
        let x = Tensor4::<f64>::new([1, 2, 1, 1], vec![0.0, 2.0]).unwrap();
        let scale = Tensor4::full([1, 2, 1, 1], 1.0);
        let shift = Tensor4::zeros([1, 2, 1, 1]);
        let y = layer_norm_cf(&x, &scale, &shift, 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_zero_channels() {
        let x = Tensor4::<f64>::zeros([1, 0, 2, 2]);
        let a = Tensor4::<f64>::zeros([1, 0, 1, 1]);
        assert!(layer_norm_cf(&x, &a, &a, 1e-6).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor4::<f64>::new([1, 1, 1, 3], vec![0.0, 10.0, -10.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn avg_pool_2x2() {
        let x = Tensor4::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 2.5);
    }

    #[test]
    fn avg_pool_rejects_empty_spatial() {
        let x = Tensor4::<f64>::zeros([1, 1, 0, 4]);
        assert!(global_avg_pool(&x).is_err());
    }

    #[test]
    fn split_concat_round_trip() {
        let x = Tensor4::<f64>::from_fn([2, 6, 3, 3], |b, c, h, w| (b * 100 + c * 10 + h + w) as f64);
        let parts = split_channels(&x, &[1, 2, 3]).unwrap();
        let refs: Vec<&Tensor4<f64>> = parts.iter().collect();
        let back = concat_channels(&refs).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_rejects_bad_sizes() {
        let x = Tensor4::<f64>::zeros([1, 5, 2, 2]);
        assert!(split_channels(&x, &[2, 2]).is_err());
    }

    #[test]
    fn upsample_same_size_is_identity() {
        let x = Tensor4::<f64>::from_fn([1, 2, 3, 4], |_, c, h, w| (c * 12 + h * 4 + w) as f64);
        let y = upsample_bilinear(&x, 3, 4).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor4::<f64>::full([1, 1, 2, 3], 7.5);
        let y = upsample_bilinear(&x, 8, 12).unwrap();
        assert!(y.data().iter().all(|&v| (v - 7.5).abs() < 1e-12));
    }
}
