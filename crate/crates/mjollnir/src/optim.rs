//! AdamW with decoupled weight decay.
//!
//! The decay term is applied directly to the parameter, never through the
//! gradient, and is skipped for normalization affines and layer-scale
//! vectors. All moment math runs in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamKind;
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 15,
            batch_size: 8,
            seed: 42,
            grad_clip_norm: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate for the given epoch (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + libm::cos(std::f64::consts::PI * t))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentSlot<T: Scalar> {
    pub name: String,
    pub m: Tensor4<T>,
    pub v: Tensor4<T>,
    pub decay: bool,
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<T: Scalar> {
    pub t: u64,
    pub slots: Vec<MomentSlot<T>>,
}

impl<T: Scalar> OptimState<T> {
    /// Zeroed moments mirroring the parameter tensors. Weight decay applies
    /// to kernels and biases only.
    pub fn init(params: &ModelParams<T>) -> Self {
        let mut slots = Vec::new();
        params.visit(&mut |name, kind, t| {
            slots.push(MomentSlot {
                name,
                m: Tensor4::zeros(t.dims()),
                v: Tensor4::zeros(t.dims()),
                decay: matches!(kind, ParamKind::Kernel | ParamKind::Bias),
            });
        });
        Self { t: 0, slots }
    }
}

/// One AdamW update on a single tensor. `t` is the (already incremented)
/// step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    name: &str,
    param: &mut Tensor4<T>,
    grad: &Tensor4<T>,
    m: &mut Tensor4<T>,
    v: &mut Tensor4<T>,
    t: u64,
    cfg: &OptimConfig,
    lr_t: f64,
    decay: bool,
) -> Result<()> {
    if !param.same_dims(grad) {
        return Err(Error::Train(format!(
            "gradient shape {:?} does not match parameter `{name}` {:?}",
            grad.dims(),
            param.dims()
        )));
    }
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..param.len() {
        let g = grad.data()[i].to_f64();
        if !g.is_finite() {
            return Err(Error::Train(format!(
                "non-finite gradient for parameter `{name}` at flat index {i}"
            )));
        }
        let mi = cfg.beta1 * m.data()[i].to_f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v.data()[i].to_f64() + (1.0 - cfg.beta2) * g * g;
        m.data_mut()[i] = T::from_f64(mi);
        v.data_mut()[i] = T::from_f64(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = param.data()[i].to_f64();
        let step = lr_t * (m_hat / (libm::sqrt(v_hat) + cfg.eps) + wd * p);
        param.data_mut()[i] = T::from_f64(p - step);
    }
    Ok(())
}

/// One optimizer step over the whole model. `grads` must align with the
/// parameter visitation order (as produced by `Tape::param_grads`).
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[(String, Tensor4<T>)],
    state: &mut OptimState<T>,
    cfg: &OptimConfig,
    lr_t: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let mut ix = 0usize;
    let mut result = Ok(());
    params.visit_mut(&mut |name, _, tensor| {
        if result.is_err() {
            return;
        }
        if ix >= grads.len() || ix >= state.slots.len() {
            result = Err(Error::Train(format!(
                "gradient list ended before parameter `{name}`"
            )));
            return;
        }
        let (gname, g) = &grads[ix];
        let slot = &mut state.slots[ix];
        if gname != &name || slot.name != name {
            result = Err(Error::Train(format!(
                "parameter order mismatch at index {ix}: param `{name}`, grad `{gname}`, state `{}`",
                slot.name
            )));
            return;
        }
        result = adamw_update(
            &name,
            tensor,
            g,
            &mut slot.m,
            &mut slot.v,
            t,
            cfg,
            lr_t,
            slot.decay,
        );
        ix += 1;
    });
    result?;
    if ix != grads.len() {
        return Err(Error::Train(format!(
            "{} gradients supplied but only {ix} parameters visited",
            grads.len()
        )));
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(String, Tensor4<T>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for v in g.data() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}
