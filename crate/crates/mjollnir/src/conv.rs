//! 2-D cross-correlation kernels (forward and backward).
//!
//! One general path covers every stride/padding/groups combination; a
//! pointwise path accelerates 1x1 stride-1 convolutions, which dominate the
//! model's cost. Both paths accumulate each output element in `f64` in the
//! same fixed `(ci, kh, kw)` order, so they produce bit-identical results.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Stride, zero-padding, and channel grouping of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn pointwise(groups: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups,
        }
    }

    /// Stride-1 depthwise spec with "same" padding for an odd kernel.
    pub fn depthwise_same(channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (kh / 2, kw / 2),
            groups: channels,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// `floor((n + 2p - k) / s) + 1`, rejecting kernels larger than the padded input.
pub fn conv_out_dim(n: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::Shape {
            op: "conv2d",
            msg: "stride must be >= 1".into(),
        });
    }
    if k == 0 {
        return Err(Error::Shape {
            op: "conv2d",
            msg: "kernel extent must be >= 1".into(),
        });
    }
    if n + 2 * p < k {
        return Err(Error::Shape {
            op: "conv2d",
            msg: format!("kernel extent {k} exceeds padded input extent {}", n + 2 * p),
        });
    }
    Ok((n + 2 * p - k) / s + 1)
}

struct Geometry {
    cout: usize,
    cpg: usize,
    cout_pg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn validate<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    let [_, cin, h, wd] = x.dims();
    let [cout, cpg, kh, kw] = w.dims();
    if spec.groups == 0 {
        return Err(Error::Shape {
            op: "conv2d",
            msg: "groups must be >= 1".into(),
        });
    }
    if cin % spec.groups != 0 {
        return Err(Error::Dim {
            op: "conv2d",
            axis: "in_channels",
            expected: (cin / spec.groups.max(1)).max(1) * spec.groups,
            got: cin,
        });
    }
    if cpg != cin / spec.groups {
        return Err(Error::Dim {
            op: "conv2d",
            axis: "kernel_in_channels",
            expected: cin / spec.groups,
            got: cpg,
        });
    }
    if cout % spec.groups != 0 {
        return Err(Error::Dim {
            op: "conv2d",
            axis: "out_channels",
            expected: (cout / spec.groups).max(1) * spec.groups,
            got: cout,
        });
    }
    if let Some(b) = bias {
        if b.dims() != [1, cout, 1, 1] {
            return Err(Error::Dim {
                op: "conv2d",
                axis: "bias",
                expected: cout,
                got: b.len(),
            });
        }
    }
    let oh = conv_out_dim(h, kh, spec.padding.0, spec.stride.0)?;
    let ow = conv_out_dim(wd, kw, spec.padding.1, spec.stride.1)?;
    Ok(Geometry {
        cout,
        cpg,
        cout_pg: cout / spec.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Cross-correlation of `x` with `w`, plus an optional per-channel bias.
///
/// `x` is `(B, Cin, H, W)`, `w` is `(Cout, Cin/groups, kh, kw)`, bias is
/// `(1, Cout, 1, 1)`. Accumulation runs in `f64` per output element over the
/// fixed `(ci, kh, kw)` order; the bias is added after the sum.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let g = validate(x, w, bias, spec)?;
    let [b, _, h, wd] = x.dims();
    let bias64: Vec<f64> = match bias {
        Some(bt) => bt.data().iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; g.cout],
    };
    let mut out = Tensor4::<T>::zeros([b, g.cout, g.oh, g.ow]);
    if g.kh == 1 && g.kw == 1 && spec.is_pointwise() {
        pointwise_fwd(x, w, &bias64, spec, &g, &mut out);
    } else {
        general_fwd(x, w, &bias64, spec, &g, h, wd, &mut out);
    }
    Ok(out)
}

const CHUNK: usize = 2048;

fn pointwise_fwd<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias64: &[f64],
    spec: &ConvSpec,
    g: &Geometry,
    out: &mut Tensor4<T>,
) {
    let p_total = g.oh * g.ow;
    let wdat = w.data();
    let mut acc = vec![0.0f64; CHUNK.min(p_total.max(1))];
    for b in 0..x.b() {
        for grp in 0..spec.groups {
            let mut p0 = 0;
            while p0 < p_total {
                let n = CHUNK.min(p_total - p0);
                for cog in 0..g.cout_pg {
                    let co = grp * g.cout_pg + cog;
                    let a = &mut acc[..n];
                    a.fill(0.0);
                    for cig in 0..g.cpg {
                        let ci = grp * g.cpg + cig;
                        let wv = wdat[co * g.cpg + cig].to_f64();
                        let row = &x.plane(b, ci)[p0..p0 + n];
                        for (av, &xv) in a.iter_mut().zip(row.iter()) {
                            *av += wv * xv.to_f64();
                        }
                    }
                    let bv = bias64[co];
                    let orow = &mut out.plane_mut(b, co)[p0..p0 + n];
                    for (o, &av) in orow.iter_mut().zip(a.iter()) {
                        *o = T::from_f64(av + bv);
                    }
                }
                p0 += n;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn general_fwd<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias64: &[f64],
    spec: &ConvSpec,
    g: &Geometry,
    h: usize,
    wd: usize,
    out: &mut Tensor4<T>,
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let wdat = w.data();
    for b in 0..x.b() {
        for grp in 0..spec.groups {
            for cog in 0..g.cout_pg {
                let co = grp * g.cout_pg + cog;
                let bv = bias64[co];
                for oh in 0..g.oh {
                    for ow in 0..g.ow {
                        let mut acc = 0.0f64;
                        for cig in 0..g.cpg {
                            let ci = grp * g.cpg + cig;
                            let xplane = x.plane(b, ci);
                            let wbase = ((co * g.cpg + cig) * g.kh) * g.kw;
                            for kh in 0..g.kh {
                                let ih = oh * sh + kh;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                let xrow = &xplane[(ih - ph) * wd..(ih - ph + 1) * wd];
                                let wrow = &wdat[wbase + kh * g.kw..wbase + (kh + 1) * g.kw];
                                for (kw, &wv) in wrow.iter().enumerate() {
                                    let iw = ow * sw + kw;
                                    if iw < pw || iw - pw >= wd {
                                        continue;
                                    }
                                    acc += wv.to_f64() * xrow[iw - pw].to_f64();
                                }
                            }
                        }
                        let oi = out.idx(b, co, oh, ow);
                        out.data_mut()[oi] = T::from_f64(acc + bv);
                    }
                }
            }
        }
    }
}

/// Gradient of the loss w.r.t. the convolution bias: sum of `gout` over
/// batch and spatial axes, in `(b, oh, ow)` order.
pub fn conv2d_grad_bias<T: Scalar>(gout: &Tensor4<T>) -> Tensor4<T> {
    let [b, cout, _, _] = gout.dims();
    let mut acc = vec![0.0f64; cout];
    for bi in 0..b {
        for co in 0..cout {
            let a = &mut acc[co];
            for &gv in gout.plane(bi, co) {
                *a += gv.to_f64();
            }
        }
    }
    Tensor4::new([1, cout, 1, 1], acc.iter().map(|&v| T::from_f64(v)).collect()).unwrap()
}

/// Gradient of the loss w.r.t. the kernel.
pub fn conv2d_grad_kernel<T: Scalar>(
    x: &Tensor4<T>,
    gout: &Tensor4<T>,
    kdims: [usize; 4],
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let [cout, cpg, kh, kw] = kdims;
    let [b, _, h, wd] = x.dims();
    let [_, _, ohn, own] = gout.dims();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cout_pg = cout / spec.groups;
    let mut acc = vec![0.0f64; cout * cpg * kh * kw];
    if kh == 1 && kw == 1 && spec.is_pointwise() {
        // gw[co][ci] = sum_b sum_p gout[b,co,p] * x[b,ci,p]
        for bi in 0..b {
            for grp in 0..spec.groups {
                for cog in 0..cout_pg {
                    let co = grp * cout_pg + cog;
                    let gplane = gout.plane(bi, co);
                    for cig in 0..cpg {
                        let ci = grp * cpg + cig;
                        let xplane = x.plane(bi, ci);
                        let a = &mut acc[co * cpg + cig];
                        for (gv, xv) in gplane.iter().zip(xplane.iter()) {
                            *a += gv.to_f64() * xv.to_f64();
                        }
                    }
                }
            }
        }
    } else {
        for bi in 0..b {
            for grp in 0..spec.groups {
                for cog in 0..cout_pg {
                    let co = grp * cout_pg + cog;
                    let gplane = gout.plane(bi, co);
                    for oh in 0..ohn {
                        for ow in 0..own {
                            let gv = gplane[oh * own + ow].to_f64();
                            for cig in 0..cpg {
                                let ci = grp * cpg + cig;
                                let xplane = x.plane(bi, ci);
                                let abase = ((co * cpg + cig) * kh) * kw;
                                for khi in 0..kh {
                                    let ih = oh * sh + khi;
                                    if ih < ph || ih - ph >= h {
                                        continue;
                                    }
                                    let xrow = &xplane[(ih - ph) * wd..(ih - ph + 1) * wd];
                                    for kwi in 0..kw {
                                        let iw = ow * sw + kwi;
                                        if iw < pw || iw - pw >= wd {
                                            continue;
                                        }
                                        acc[abase + khi * kw + kwi] +=
                                            gv * xrow[iw - pw].to_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(kdims, acc.iter().map(|&v| T::from_f64(v)).collect())
}

/// Gradient of the loss w.r.t. the convolution input.
pub fn conv2d_grad_input<T: Scalar>(
    w: &Tensor4<T>,
    gout: &Tensor4<T>,
    xdims: [usize; 4],
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let [b, cin, h, wd] = xdims;
    let [cout, cpg, kh, kw] = w.dims();
    let [_, _, ohn, own] = gout.dims();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cout_pg = cout / spec.groups;
    let wdat = w.data();
    let mut acc = vec![0.0f64; b * cin * h * wd];
    let plane = h * wd;
    if kh == 1 && kw == 1 && spec.is_pointwise() {
        // gin[ci][p] = sum_co w[co][ci] * gout[co][p]
        for bi in 0..b {
            for grp in 0..spec.groups {
                for cig in 0..cpg {
                    let ci = grp * cpg + cig;
                    let arow = &mut acc[(bi * cin + ci) * plane..(bi * cin + ci + 1) * plane];
                    for cog in 0..cout_pg {
                        let co = grp * cout_pg + cog;
                        let wv = wdat[co * cpg + cig].to_f64();
                        let gplane = gout.plane(bi, co);
                        for (av, gv) in arow.iter_mut().zip(gplane.iter()) {
                            *av += wv * gv.to_f64();
                        }
                    }
                }
            }
        }
    } else {
        for bi in 0..b {
            for grp in 0..spec.groups {
                for cog in 0..cout_pg {
                    let co = grp * cout_pg + cog;
                    let gplane = gout.plane(bi, co);
                    for oh in 0..ohn {
                        for ow in 0..own {
                            let gv = gplane[oh * own + ow].to_f64();
                            for cig in 0..cpg {
                                let ci = grp * cpg + cig;
                                let abase = (bi * cin + ci) * plane;
                                let wbase = ((co * cpg + cig) * kh) * kw;
                                for khi in 0..kh {
                                    let ih = oh * sh + khi;
                                    if ih < ph || ih - ph >= h {
                                        continue;
                                    }
                                    for kwi in 0..kw {
                                        let iw = ow * sw + kwi;
                                        if iw < pw || iw - pw >= wd {
                                            continue;
                                        }
                                        acc[abase + (ih - ph) * wd + (iw - pw)] += gv
                                            * wdat[wbase + khi * kw + kwi].to_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(xdims, acc.iter().map(|&v| T::from_f64(v)).collect())
}
