//! The full network: depthwise-separable stem, four stages of residual
//! blocks at widths 48/96/192/288 (depths 3-3-27-3 by default), and dual
//! 1x1-convolution heads for occurrence logits and flash magnitude.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fwd::{Fwd, Val};
use crate::layers::{mjolnir_block, BlockParams, BoundBlock, ParamKind, LN_EPS};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub se_enabled: bool,
    pub se_reduction: usize,
    pub layer_scale_enabled: bool,
    pub layer_scale_init: f64,
    pub drop_path_rate: f64,
    /// With `true` every convolution runs stride 1 and both heads emit the
    /// input grid. With `false` stages 2-4 downsample by 2 and the features
    /// are bilinearly upsampled back before the heads.
    pub resolution_preserving: bool,
    pub band_kernel: usize,
    pub pw_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 9,
            stage_widths: [48, 96, 192, 288],
            stage_depths: [3, 3, 27, 3],
            se_enabled: false,
            se_reduction: 16,
            layer_scale_enabled: true,
            layer_scale_init: 1e-6,
            drop_path_rate: 0.0,
            resolution_preserving: true,
            band_kernel: 11,
            pw_groups: 1,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: 9,
            stage_widths: [4, 8, 8, 8],
            stage_depths: [1, 1, 2, 1],
            band_kernel: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be >= 1".into()));
        }
        if self.band_kernel % 2 == 0 || self.band_kernel == 0 {
            return Err(Error::Config(format!(
                "band_kernel must be odd and positive, got {}",
                self.band_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate must lie in [0, 1), got {}",
                self.drop_path_rate
            )));
        }
        if self.se_enabled && self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be >= 1".into()));
        }
        if self.pw_groups == 0 {
            return Err(Error::Config("pw_groups must be >= 1".into()));
        }
        for &w in &self.stage_widths {
            if w % self.pw_groups != 0 {
                return Err(Error::Config(format!(
                    "pw_groups {} must divide every stage width, violated by {w}",
                    self.pw_groups
                )));
            }
        }
        Ok(())
    }
}

/// Depthwise 3x3 plus pointwise 1x1 with layer norm; used by the stem and
/// every stage transition.
#[derive(Debug, Clone)]
pub struct DwSepParams<T: Scalar> {
    pub dw_w: Tensor4<T>,
    pub dw_b: Tensor4<T>,
    pub pw_w: Tensor4<T>,
    pub pw_b: Tensor4<T>,
    pub ln_scale: Tensor4<T>,
    pub ln_shift: Tensor4<T>,
}

impl<T: Scalar> DwSepParams<T> {
    fn new(c_in: usize, c_out: usize) -> Self {
        Self {
            dw_w: Tensor4::zeros([c_in, 1, 3, 3]),
            dw_b: Tensor4::zeros([1, c_in, 1, 1]),
            pw_w: Tensor4::zeros([c_out, c_in, 1, 1]),
            pw_b: Tensor4::zeros([1, c_out, 1, 1]),
            ln_scale: Tensor4::full([1, c_out, 1, 1], T::ONE),
            ln_shift: Tensor4::zeros([1, c_out, 1, 1]),
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, ParamKind, &'s Tensor4<T>)) {
        f(format!("{prefix}.dw.kernel"), ParamKind::Kernel, &self.dw_w);
        f(format!("{prefix}.dw.bias"), ParamKind::Bias, &self.dw_b);
        f(format!("{prefix}.pw.kernel"), ParamKind::Kernel, &self.pw_w);
        f(format!("{prefix}.pw.bias"), ParamKind::Bias, &self.pw_b);
        f(format!("{prefix}.ln.scale"), ParamKind::NormScale, &self.ln_scale);
        f(format!("{prefix}.ln.shift"), ParamKind::NormShift, &self.ln_shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, ParamKind, &mut Tensor4<T>)) {
        f(format!("{prefix}.dw.kernel"), ParamKind::Kernel, &mut self.dw_w);
        f(format!("{prefix}.dw.bias"), ParamKind::Bias, &mut self.dw_b);
        f(format!("{prefix}.pw.kernel"), ParamKind::Kernel, &mut self.pw_w);
        f(format!("{prefix}.pw.bias"), ParamKind::Bias, &mut self.pw_b);
        f(format!("{prefix}.ln.scale"), ParamKind::NormScale, &mut self.ln_scale);
        f(format!("{prefix}.ln.shift"), ParamKind::NormShift, &mut self.ln_shift);
    }

    fn bind(&self, cx: &Fwd<'_, T>, prefix: &str) -> BoundDwSep<T> {
        BoundDwSep {
            dw_w: cx.param(&format!("{prefix}.dw.kernel"), &self.dw_w),
            dw_b: cx.param(&format!("{prefix}.dw.bias"), &self.dw_b),
            pw_w: cx.param(&format!("{prefix}.pw.kernel"), &self.pw_w),
            pw_b: cx.param(&format!("{prefix}.pw.bias"), &self.pw_b),
            ln_scale: cx.param(&format!("{prefix}.ln.scale"), &self.ln_scale),
            ln_shift: cx.param(&format!("{prefix}.ln.shift"), &self.ln_shift),
        }
    }
}

struct BoundDwSep<T: Scalar> {
    dw_w: Val<T>,
    dw_b: Val<T>,
    pw_w: Val<T>,
    pw_b: Val<T>,
    ln_scale: Val<T>,
    ln_shift: Val<T>,
}

/// 1x1 output head.
#[derive(Debug, Clone)]
pub struct HeadParams<T: Scalar> {
    pub w: Tensor4<T>,
    pub b: Tensor4<T>,
}

impl<T: Scalar> HeadParams<T> {
    fn new(c_in: usize) -> Self {
        Self {
            w: Tensor4::zeros([1, c_in, 1, 1]),
            b: Tensor4::zeros([1, 1, 1, 1]),
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, ParamKind, &'s Tensor4<T>)) {
        f(format!("{prefix}.kernel"), ParamKind::Kernel, &self.w);
        f(format!("{prefix}.bias"), ParamKind::Bias, &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, ParamKind, &mut Tensor4<T>)) {
        f(format!("{prefix}.kernel"), ParamKind::Kernel, &mut self.w);
        f(format!("{prefix}.bias"), ParamKind::Bias, &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct StageParams<T: Scalar> {
    pub transition: DwSepParams<T>,
    pub blocks: Vec<BlockParams<T>>,
}

/// All learnable weights of the network.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub stem: DwSepParams<T>,
    pub stages: Vec<StageParams<T>>,
    pub head_cls: HeadParams<T>,
    pub head_reg: HeadParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Zero/identity-initialized skeleton for the given config.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let total_blocks: usize = config.stage_depths.iter().sum();
        let mut block_ix = 0usize;
        let mut stages = Vec::with_capacity(4);
        let mut c_prev = config.stage_widths[0];
        for (si, (&width, &depth)) in config
            .stage_widths
            .iter()
            .zip(config.stage_depths.iter())
            .enumerate()
        {
            let c_in = if si == 0 { config.stage_widths[0] } else { c_prev };
            let transition = DwSepParams::new(c_in, width);
            let mut blocks = Vec::with_capacity(depth);
            for _ in 0..depth {
                // Stochastic depth increases linearly with block depth.
                let p = if total_blocks > 1 {
                    config.drop_path_rate * block_ix as f64 / (total_blocks - 1) as f64
                } else {
                    config.drop_path_rate
                };
                blocks.push(BlockParams::new(
                    width,
                    config.band_kernel,
                    config.se_enabled.then_some(config.se_reduction),
                    config.layer_scale_enabled,
                    p,
                    config.pw_groups,
                )?);
                block_ix += 1;
            }
            stages.push(StageParams { transition, blocks });
            c_prev = width;
        }
        let c_final = config.stage_widths[3];
        Ok(Self {
            config: config.clone(),
            stem: DwSepParams::new(config.in_channels, config.stage_widths[0]),
            stages,
            head_cls: HeadParams::new(c_final),
            head_reg: HeadParams::new(c_final),
        })
    }

    pub fn visit<'s>(&'s self, f: &mut impl FnMut(String, ParamKind, &'s Tensor4<T>)) {
        self.stem.visit("stem", f);
        for (si, stage) in self.stages.iter().enumerate() {
            stage.transition.visit(&format!("stage{si}.transition"), f);
            for (bi, block) in stage.blocks.iter().enumerate() {
                block.visit(&format!("stage{si}.block{bi}"), f);
            }
        }
        self.head_cls.visit("head_cls", f);
        self.head_reg.visit("head_reg", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, ParamKind, &mut Tensor4<T>)) {
        self.stem.visit_mut("stem", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            stage
                .transition
                .visit_mut(&format!("stage{si}.transition"), f);
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("stage{si}.block{bi}"), f);
            }
        }
        self.head_cls.visit_mut("head_cls", f);
        self.head_reg.visit_mut("head_reg", f);
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, t| ok &= t.all_finite());
        ok
    }

    /// Flattens every parameter into one `f64` vector (visitation order).
    pub fn to_flat_f64(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, t| out.extend(t.data().iter().map(|v| v.to_f64())));
        out
    }

    /// Writes a flat `f64` vector (as produced by [`Self::to_flat_f64`])
    /// back into the parameter tensors.
    pub fn load_flat_f64(&mut self, flat: &[f64]) -> Result<()> {
        let mut off = 0usize;
        let mut err = None;
        self.visit_mut(&mut |name, _, t| {
            if err.is_some() {
                return;
            }
            let n = t.len();
            if off + n > flat.len() {
                err = Some(Error::Shape {
                    op: "ModelParams::load_flat_f64",
                    msg: format!("flat vector too short at {name}"),
                });
                return;
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(flat[off..off + n].iter()) {
                *dst = T::from_f64(src);
            }
            off += n;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if off != flat.len() {
            return Err(Error::Shape {
                op: "ModelParams::load_flat_f64",
                msg: format!("flat vector has {} values, model needs {off}", flat.len()),
            });
        }
        Ok(())
    }
}

/// Samples the standard truncated normal (|z| <= 2) scaled by `std`.
fn trunc_normal(rng: &mut ChaCha20Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fresh parameters: kernels from a truncated normal with
/// `std = sqrt(2 / fan_in)`, biases and shifts zero, norm scales one, layer
/// scale at its configured init. Deterministic per seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::skeleton(config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ls_init = config.layer_scale_init;
    params.visit_mut(&mut |_, kind, t| match kind {
        ParamKind::Kernel => {
            let dims = t.dims();
            let fan_in = (dims[1] * dims[2] * dims[3]).max(1);
            let std = libm::sqrt(2.0 / fan_in as f64);
            for v in t.data_mut() {
                *v = T::from_f64(trunc_normal(&mut rng, std));
            }
        }
        ParamKind::LayerScale => {
            for v in t.data_mut() {
                *v = T::from_f64(ls_init);
            }
        }
        ParamKind::Bias | ParamKind::NormShift | ParamKind::NormScale => {}
    });
    Ok(params)
}

fn dwsep_forward<T: Scalar>(
    cx: &mut Fwd<'_, T>,
    x: &Val<T>,
    p: &BoundDwSep<T>,
    stride: usize,
) -> Result<Val<T>> {
    let c_in = cx.tensor(&p.dw_w).b();
    let spec = ConvSpec {
        stride: (stride, stride),
        padding: (1, 1),
        groups: c_in,
    };
    let h = cx.conv2d(x, &p.dw_w, Some(&p.dw_b), spec)?;
    let h = cx.conv2d(&h, &p.pw_w, Some(&p.pw_b), ConvSpec::pointwise(1))?;
    cx.layer_norm_cf(&h, &p.ln_scale, &p.ln_shift, LN_EPS)
}

/// Runs the network. Returns `(logits, magnitudes)`; magnitudes are passed
/// through softplus so they are strictly positive. With a resolution
/// preserving config both outputs are `(B, 1, H, W)` on the input grid.
pub fn forward<T: Scalar>(
    cx: &mut Fwd<'_, T>,
    params: &ModelParams<T>,
    x: &Tensor4<T>,
) -> Result<(Val<T>, Val<T>)> {
    let cfg = &params.config;
    if x.c() != cfg.in_channels {
        return Err(Error::Dim {
            op: "model::forward",
            axis: "in_channels",
            expected: cfg.in_channels,
            got: x.c(),
        });
    }
    let (in_h, in_w) = (x.h(), x.w());
    let xv = cx.leaf(x);

    let stem = params.stem.bind(cx, "stem");
    let mut h = dwsep_forward(cx, &xv, &stem, 1)?;
    for (si, stage) in params.stages.iter().enumerate() {
        let stride = if cfg.resolution_preserving || si == 0 { 1 } else { 2 };
        let bound_t = stage.transition.bind(cx, &format!("stage{si}.transition"));
        h = dwsep_forward(cx, &h, &bound_t, stride)?;
        for (bi, block) in stage.blocks.iter().enumerate() {
            let bound_b: BoundBlock<T> = block.bind(cx, &format!("stage{si}.block{bi}"));
            h = mjolnir_block(cx, &h, &bound_b)?;
        }
    }
    if !cfg.resolution_preserving {
        h = cx.upsample_bilinear(&h, in_h, in_w)?;
    }
    let wc = cx.param("head_cls.kernel", &params.head_cls.w);
    let bc = cx.param("head_cls.bias", &params.head_cls.b);
    let logits = cx.conv2d(&h, &wc, Some(&bc), ConvSpec::pointwise(1))?;
    let wr = cx.param("head_reg.kernel", &params.head_reg.w);
    let br = cx.param("head_reg.bias", &params.head_reg.b);
    let mag_raw = cx.conv2d(&h, &wr, Some(&br), ConvSpec::pointwise(1))?;
    let magnitudes = cx.softplus(&mag_raw)?;
    Ok((logits, magnitudes))
}

/// Evaluation-mode forward pass returning concrete tensors.
pub fn forward_eval<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let mut cx = Fwd::eager();
    let (lg, mg) = forward(&mut cx, params, x)?;
    let logits = cx.tensor(&lg).as_ref().clone();
    let magnitudes = cx.tensor(&mg).as_ref().clone();
    Ok((logits, magnitudes))
}

/// How the two heads combine into one density field at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Magnitude where `sigmoid(logit) > tau`, zero elsewhere.
    Gated,
    /// `sigmoid(logit) * magnitude`.
    Expected,
}

impl std::str::FromStr for PredictMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "expected" => Ok(Self::Expected),
            other => Err(Error::Config(format!(
                "unknown prediction mode `{other}` (expected `gated` or `expected`)"
            ))),
        }
    }
}

/// Combines logits and magnitudes into a non-negative density field.
pub fn predict_density<T: Scalar>(
    logits: &Tensor4<T>,
    magnitudes: &Tensor4<T>,
    mode: PredictMode,
    tau: f64,
) -> Result<Tensor4<T>> {
    if !logits.same_dims(magnitudes) {
        return Err(Error::Shape {
            op: "predict_density",
            msg: format!("logits {:?} vs magnitudes {:?}", logits.dims(), magnitudes.dims()),
        });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!(
            "gating threshold tau must lie in (0, 1), got {tau}"
        )));
    }
    let mut out = Tensor4::<T>::zeros(logits.dims());
    for (i, (&lv, &mv)) in logits
        .data()
        .iter()
        .zip(magnitudes.data().iter())
        .enumerate()
    {
        let p = scalar::sigmoid(lv.to_f64());
        out.data_mut()[i] = match mode {
            PredictMode::Gated => {
                if p > tau {
                    mv
                } else {
                    T::ZERO
                }
            }
            PredictMode::Expected => T::from_f64(p * mv.to_f64()),
        };
    }
    Ok(out)
}
