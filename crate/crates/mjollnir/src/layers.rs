//! Composite layers: Inception-style depthwise convolution, pointwise group
//! convolution, squeeze-and-excitation, layer scale, stochastic depth, and
//! the residual block combining them.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fwd::{Fwd, Val};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Epsilon used by every layer normalization in the network.
pub const LN_EPS: f64 = 1e-6;

/// What role a parameter tensor plays; decides init and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    NormScale,
    NormShift,
    LayerScale,
}

/// Parameters of the four-branch depthwise convolution.
///
/// Channels are split contiguously in the order
/// (horizontal band, vertical band, square, identity); each convolutional
/// branch runs a depthwise kernel with "same" padding.
#[derive(Debug, Clone)]
pub struct InceptionDwParams<T: Scalar> {
    /// `(c_h, 1, 1, k_band)` horizontal band kernel.
    pub k_h: Tensor4<T>,
    /// `(c_v, 1, k_band, 1)` vertical band kernel.
    pub k_v: Tensor4<T>,
    /// `(c_sq, 1, 3, 3)` square kernel.
    pub k_sq: Tensor4<T>,
    /// Channels passed through untouched.
    pub c_id: usize,
}

impl<T: Scalar> InceptionDwParams<T> {
    /// Zero-initialized parameters with the branch ratio `floor(C/8)` per
    /// convolutional branch; the identity branch takes the remainder.
    pub fn new(channels: usize, k_band: usize) -> Result<Self> {
        if k_band % 2 == 0 || k_band == 0 {
            return Err(Error::Config(format!(
                "band kernel length must be odd and positive, got {k_band}"
            )));
        }
        let c_conv = channels / 8;
        let c_id = channels - 3 * c_conv;
        Ok(Self {
            k_h: Tensor4::zeros([c_conv, 1, 1, k_band]),
            k_v: Tensor4::zeros([c_conv, 1, k_band, 1]),
            k_sq: Tensor4::zeros([c_conv, 1, 3, 3]),
            c_id,
        })
    }

    /// Channel split sizes in concatenation order (h, v, square, identity).
    pub fn splits(&self) -> [usize; 4] {
        [self.k_h.b(), self.k_v.b(), self.k_sq.b(), self.c_id]
    }

    pub fn channels(&self) -> usize {
        self.splits().iter().sum()
    }

    pub fn visit<'s>(
        &'s self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &'s Tensor4<T>),
    ) {
        f(format!("{prefix}.k_h"), ParamKind::Kernel, &self.k_h);
        f(format!("{prefix}.k_v"), ParamKind::Kernel, &self.k_v);
        f(format!("{prefix}.k_sq"), ParamKind::Kernel, &self.k_sq);
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &mut Tensor4<T>),
    ) {
        f(format!("{prefix}.k_h"), ParamKind::Kernel, &mut self.k_h);
        f(format!("{prefix}.k_v"), ParamKind::Kernel, &mut self.k_v);
        f(format!("{prefix}.k_sq"), ParamKind::Kernel, &mut self.k_sq);
    }

    pub fn bind(&self, cx: &Fwd<'_, T>, prefix: &str) -> BoundInceptionDw<T> {
        BoundInceptionDw {
            k_h: cx.param(&format!("{prefix}.k_h"), &self.k_h),
            k_v: cx.param(&format!("{prefix}.k_v"), &self.k_v),
            k_sq: cx.param(&format!("{prefix}.k_sq"), &self.k_sq),
            splits: self.splits(),
        }
    }
}

pub struct BoundInceptionDw<T: Scalar> {
    pub k_h: Val<T>,
    pub k_v: Val<T>,
    pub k_sq: Val<T>,
    pub splits: [usize; 4],
}

/// Squeeze-and-excitation bottleneck weights (no biases).
#[derive(Debug, Clone)]
pub struct SeParams<T: Scalar> {
    /// `(c_reduced, C, 1, 1)` squeeze projection.
    pub w1: Tensor4<T>,
    /// `(C, c_reduced, 1, 1)` excitation projection.
    pub w2: Tensor4<T>,
}

impl<T: Scalar> SeParams<T> {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("SE reduction ratio must be >= 1".into()));
        }
        let c_red = (channels / reduction).max(1);
        Ok(Self {
            w1: Tensor4::zeros([c_red, channels, 1, 1]),
            w2: Tensor4::zeros([channels, c_red, 1, 1]),
        })
    }

    pub fn visit<'s>(
        &'s self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &'s Tensor4<T>),
    ) {
        f(format!("{prefix}.w1"), ParamKind::Kernel, &self.w1);
        f(format!("{prefix}.w2"), ParamKind::Kernel, &self.w2);
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &mut Tensor4<T>),
    ) {
        f(format!("{prefix}.w1"), ParamKind::Kernel, &mut self.w1);
        f(format!("{prefix}.w2"), ParamKind::Kernel, &mut self.w2);
    }

    pub fn bind(&self, cx: &Fwd<'_, T>, prefix: &str) -> BoundSe<T> {
        BoundSe {
            w1: cx.param(&format!("{prefix}.w1"), &self.w1),
            w2: cx.param(&format!("{prefix}.w2"), &self.w2),
        }
    }
}

pub struct BoundSe<T: Scalar> {
    pub w1: Val<T>,
    pub w2: Val<T>,
}

/// Parameters of one residual block.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln_scale: Tensor4<T>,
    pub ln_shift: Tensor4<T>,
    pub incep: InceptionDwParams<T>,
    /// `(4C, C/groups, 1, 1)` expansion kernel.
    pub expand_w: Tensor4<T>,
    pub expand_b: Tensor4<T>,
    /// `(C, 4C/groups, 1, 1)` reduction kernel.
    pub reduce_w: Tensor4<T>,
    pub reduce_b: Tensor4<T>,
    pub se: Option<SeParams<T>>,
    /// `(1, C, 1, 1)` layer-scale vector, when enabled.
    pub gamma: Option<Tensor4<T>>,
    pub drop_path: f64,
    pub pw_groups: usize,
}

impl<T: Scalar> BlockParams<T> {
    pub fn new(
        channels: usize,
        k_band: usize,
        se_reduction: Option<usize>,
        layer_scale: bool,
        drop_path: f64,
        pw_groups: usize,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("block width must be >= 1".into()));
        }
        if pw_groups == 0 || channels % pw_groups != 0 {
            return Err(Error::Config(format!(
                "pointwise groups {pw_groups} must divide block width {channels}"
            )));
        }
        let hidden = 4 * channels;
        let se = match se_reduction {
            Some(r) => Some(SeParams::new(channels, r)?),
            None => None,
        };
        Ok(Self {
            ln_scale: Tensor4::full([1, channels, 1, 1], T::ONE),
            ln_shift: Tensor4::zeros([1, channels, 1, 1]),
            incep: InceptionDwParams::new(channels, k_band)?,
            expand_w: Tensor4::zeros([hidden, channels / pw_groups, 1, 1]),
            expand_b: Tensor4::zeros([1, hidden, 1, 1]),
            reduce_w: Tensor4::zeros([channels, hidden / pw_groups, 1, 1]),
            reduce_b: Tensor4::zeros([1, channels, 1, 1]),
            se,
            gamma: layer_scale.then(|| Tensor4::zeros([1, channels, 1, 1])),
            drop_path,
            pw_groups,
        })
    }

    pub fn channels(&self) -> usize {
        self.incep.channels()
    }

    pub fn visit<'s>(
        &'s self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &'s Tensor4<T>),
    ) {
        f(format!("{prefix}.ln.scale"), ParamKind::NormScale, &self.ln_scale);
        f(format!("{prefix}.ln.shift"), ParamKind::NormShift, &self.ln_shift);
        self.incep.visit(&format!("{prefix}.incep"), f);
        f(format!("{prefix}.expand.kernel"), ParamKind::Kernel, &self.expand_w);
        f(format!("{prefix}.expand.bias"), ParamKind::Bias, &self.expand_b);
        f(format!("{prefix}.reduce.kernel"), ParamKind::Kernel, &self.reduce_w);
        f(format!("{prefix}.reduce.bias"), ParamKind::Bias, &self.reduce_b);
        if let Some(se) = &self.se {
            se.visit(&format!("{prefix}.se"), f);
        }
        if let Some(g) = &self.gamma {
            f(format!("{prefix}.gamma"), ParamKind::LayerScale, g);
        }
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, ParamKind, &mut Tensor4<T>),
    ) {
        f(format!("{prefix}.ln.scale"), ParamKind::NormScale, &mut self.ln_scale);
        f(format!("{prefix}.ln.shift"), ParamKind::NormShift, &mut self.ln_shift);
        self.incep.visit_mut(&format!("{prefix}.incep"), f);
        f(format!("{prefix}.expand.kernel"), ParamKind::Kernel, &mut self.expand_w);
        f(format!("{prefix}.expand.bias"), ParamKind::Bias, &mut self.expand_b);
        f(format!("{prefix}.reduce.kernel"), ParamKind::Kernel, &mut self.reduce_w);
        f(format!("{prefix}.reduce.bias"), ParamKind::Bias, &mut self.reduce_b);
        if let Some(se) = &mut self.se {
            se.visit_mut(&format!("{prefix}.se"), f);
        }
        if let Some(g) = &mut self.gamma {
            f(format!("{prefix}.gamma"), ParamKind::LayerScale, g);
        }
    }

    pub fn bind(&self, cx: &Fwd<'_, T>, prefix: &str) -> BoundBlock<T> {
        BoundBlock {
            ln_scale: cx.param(&format!("{prefix}.ln.scale"), &self.ln_scale),
            ln_shift: cx.param(&format!("{prefix}.ln.shift"), &self.ln_shift),
            incep: self.incep.bind(cx, &format!("{prefix}.incep")),
            expand_w: cx.param(&format!("{prefix}.expand.kernel"), &self.expand_w),
            expand_b: cx.param(&format!("{prefix}.expand.bias"), &self.expand_b),
            reduce_w: cx.param(&format!("{prefix}.reduce.kernel"), &self.reduce_w),
            reduce_b: cx.param(&format!("{prefix}.reduce.bias"), &self.reduce_b),
            se: self.se.as_ref().map(|se| se.bind(cx, &format!("{prefix}.se"))),
            gamma: self
                .gamma
                .as_ref()
                .map(|g| cx.param(&format!("{prefix}.gamma"), g)),
            drop_path: self.drop_path,
            pw_groups: self.pw_groups,
        }
    }
}

pub struct BoundBlock<T: Scalar> {
    pub ln_scale: Val<T>,
    pub ln_shift: Val<T>,
    pub incep: BoundInceptionDw<T>,
    pub expand_w: Val<T>,
    pub expand_b: Val<T>,
    pub reduce_w: Val<T>,
    pub reduce_b: Val<T>,
    pub se: Option<BoundSe<T>>,
    pub gamma: Option<Val<T>>,
    pub drop_path: f64,
    pub pw_groups: usize,
}

/// Four-branch depthwise convolution. Splits channels, convolves the three
/// kernel branches with "same" padding, passes the identity branch through,
/// and concatenates in the original order. Spatial dims are unchanged.
pub fn inception_dwconv<T: Scalar>(
    cx: &mut Fwd<'_, T>,
    x: &Val<T>,
    p: &BoundInceptionDw<T>,
) -> Result<Val<T>> {
    let c_in = cx.tensor(x).c();
    let total: usize = p.splits.iter().sum();
    if c_in != total {
        return Err(Error::Dim {
            op: "inception_dwconv",
            axis: "channels",
            expected: total,
            got: c_in,
        });
    }
    let [c_h, c_v, c_sq, c_id] = p.splits;
    if c_h == 0 && c_v == 0 && c_sq == 0 {
        return Ok(x.clone());
    }
    // Branches with zero channels are skipped entirely.
    let sizes: Vec<usize> = [c_h, c_v, c_sq, c_id].iter().copied().filter(|&s| s > 0).collect();
    let parts = cx.split_channels(x, &sizes)?;
    let mut out_parts = Vec::with_capacity(parts.len());
    let mut part_ix = 0;
    for (branch, &c) in [c_h, c_v, c_sq, c_id].iter().enumerate() {
        if c == 0 {
            continue;
        }
        let part = &parts[part_ix];
        part_ix += 1;
        let convolved = match branch {
            0 => cx.conv2d(part, &p.k_h, None, ConvSpec::depthwise_same(c, 1, kw_of(cx, &p.k_h)))?,
            1 => cx.conv2d(part, &p.k_v, None, ConvSpec::depthwise_same(c, kh_of(cx, &p.k_v), 1))?,
            2 => cx.conv2d(part, &p.k_sq, None, ConvSpec::depthwise_same(c, 3, 3))?,
            _ => part.clone(),
        };
        out_parts.push(convolved);
    }
    if out_parts.len() == 1 {
        return Ok(out_parts.pop().unwrap());
    }
    cx.concat_channels(&out_parts)
}

fn kw_of<T: Scalar>(cx: &Fwd<'_, T>, k: &Val<T>) -> usize {
    cx.tensor(k).w()
}

fn kh_of<T: Scalar>(cx: &Fwd<'_, T>, k: &Val<T>) -> usize {
    cx.tensor(k).h()
}

/// 1x1 convolution restricted to `groups` channel groups.
pub fn pointwise_group_conv<T: Scalar>(
    cx: &mut Fwd<'_, T>,
    x: &Val<T>,
    w: &Val<T>,
    b: Option<&Val<T>>,
    groups: usize,
) -> Result<Val<T>> {
    let wt = cx.tensor(w);
    if wt.h() != 1 || wt.w() != 1 {
        return Err(Error::Shape {
            op: "pointwise_group_conv",
            msg: format!("kernel must be 1x1, got {}x{}", wt.h(), wt.w()),
        });
    }
    cx.conv2d(x, w, b, ConvSpec::pointwise(groups))
}

/// Squeeze-and-excitation: global average pool, two-layer bottleneck with
/// ReLU then sigmoid, and per-channel rescaling of the input.
pub fn se_block<T: Scalar>(cx: &mut Fwd<'_, T>, x: &Val<T>, p: &BoundSe<T>) -> Result<Val<T>> {
    let s = cx.global_avg_pool(x)?;
    let h = cx.conv2d(&s, &p.w1, None, ConvSpec::pointwise(1))?;
    let h = cx.relu(&h)?;
    let e = cx.conv2d(&h, &p.w2, None, ConvSpec::pointwise(1))?;
    let e = cx.sigmoid(&e)?;
    cx.mul_bcast(x, &e)
}

/// Stochastic depth. In training, each sample's residual contribution is
/// dropped with probability `p` and scaled by `1/(1-p)` otherwise; in
/// evaluation the layer is the identity.
pub fn drop_path<T: Scalar>(cx: &mut Fwd<'_, T>, x: &Val<T>, p: f64) -> Result<Val<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "drop-path probability must lie in [0, 1), got {p}"
        )));
    }
    if !cx.training || p == 0.0 {
        return Ok(x.clone());
    }
    let b = cx.tensor(x).b();
    let keep_scale = 1.0 / (1.0 - p);
    let rng = cx.rng()?;
    let mask_vals: Vec<T> = (0..b)
        .map(|_| {
            let u: f64 = rng.random();
            if u >= p {
                T::from_f64(keep_scale)
            } else {
                T::ZERO
            }
        })
        .collect();
    let mask = cx.leaf(&Tensor4::new([b, 1, 1, 1], mask_vals)?);
    cx.mul_bcast(x, &mask)
}

/// One residual block: pre-norm, Inception depthwise convolution, 4x
/// pointwise expansion, GELU, pointwise reduction, optional SE, optional
/// layer scale, stochastic depth, and the identity connection.
pub fn mjolnir_block<T: Scalar>(
    cx: &mut Fwd<'_, T>,
    x: &Val<T>,
    p: &BoundBlock<T>,
) -> Result<Val<T>> {
    let identity = x.clone();
    let h = cx.layer_norm_cf(x, &p.ln_scale, &p.ln_shift, LN_EPS)?;
    let h = inception_dwconv(cx, &h, &p.incep)?;
    let h = pointwise_group_conv(cx, &h, &p.expand_w, Some(&p.expand_b), p.pw_groups)?;
    let h = cx.gelu(&h)?;
    let h = pointwise_group_conv(cx, &h, &p.reduce_w, Some(&p.reduce_b), p.pw_groups)?;
    let h = match &p.se {
        Some(se) => se_block(cx, &h, se)?,
        None => h,
    };
    let h = match &p.gamma {
        Some(g) => cx.mul_bcast(&h, g)?,
        None => h,
    };
    let h = drop_path(cx, &h, p.drop_path)?;
    cx.add(&identity, &h)
}
