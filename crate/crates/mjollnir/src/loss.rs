//! Multi-task objective: masked positive-weighted binary cross-entropy for
//! occurrence plus masked anomaly-weighted log-MSE for magnitude.
//!
//! Both component losses are masked means with denominator `sum(m)`. The
//! anomaly weight amplifies extreme pixels; it does not renormalize. All
//! sums run in `f64` in flat index order.

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};

/// Weights and constants of the training objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub pos_weight: f64,
    pub quantile_q: f64,
    pub w_anom: f64,
    pub epsilon: f64,
    /// Flash-density value above which a pixel counts as an anomaly.
    /// Computed once over the training split; `INFINITY` disables weighting.
    pub anomaly_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            pos_weight: 5.0,
            quantile_q: 0.99,
            w_anom: 5.0,
            epsilon: 1e-3,
            anomaly_threshold: f64::INFINITY,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config(format!(
                "pos_weight must be > 0, got {}",
                self.pos_weight
            )));
        }
        if !(self.quantile_q > 0.0 && self.quantile_q < 1.0) {
            return Err(Error::Config(format!(
                "quantile_q must lie in (0, 1), got {}",
                self.quantile_q
            )));
        }
        if !(self.w_anom >= 1.0) {
            return Err(Error::Config(format!(
                "w_anom must be >= 1, got {}",
                self.w_anom
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Scalar components of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub valid_px: u64,
    pub positive_px: u64,
    pub anomaly_px: u64,
}

/// Binary occurrence target: 1 where flash density is positive, 0 elsewhere.
/// Masked-out pixels are forced to 0. Negative density on a valid pixel is a
/// data error.
pub fn occurrence_target<T: Scalar>(y: &Tensor4<T>, mask: &Tensor4<T>) -> Result<Tensor4<T>> {
    if !y.same_dims(mask) {
        return Err(Error::Shape {
            op: "occurrence_target",
            msg: format!("target {:?} vs mask {:?}", y.dims(), mask.dims()),
        });
    }
    let mut out = Tensor4::<T>::zeros(y.dims());
    for (i, (&yv, &mv)) in y.data().iter().zip(mask.data().iter()).enumerate() {
        if mv.to_f64() == 0.0 {
            continue;
        }
        let v = yv.to_f64();
        if v < 0.0 {
            return Err(Error::Data(format!(
                "negative flash density {v} at valid pixel flat index {i}"
            )));
        }
        if v > 0.0 {
            out.data_mut()[i] = T::ONE;
        }
    }
    Ok(out)
}

/// q-quantile of the given values using linear interpolation between order
/// statistics (`h = (n - 1) q`). Input order does not matter.
pub fn anomaly_threshold(values: impl IntoIterator<Item = f64>, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("quantile must lie in (0, 1), got {q}")));
    }
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return Err(Error::Data(
            "anomaly threshold requested over an empty value stream".into(),
        ));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite target value {bad} in anomaly threshold stream"
        )));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let h = (n - 1) as f64 * q;
    let lo = h as usize;
    let frac = h - lo as f64;
    let hi = (lo + 1).min(n - 1);
    Ok(v[lo] + frac * (v[hi] - v[lo]))
}

/// Per-pixel regression weights: `w_anom` where the target exceeds the
/// anomaly threshold, 1 elsewhere. Masked pixels get weight 1 (inert).
pub fn anomaly_weights<T: Scalar>(
    y: &Tensor4<T>,
    mask: &Tensor4<T>,
    cfg: &LossConfig,
) -> Tensor4<T> {
    let mut w = Tensor4::<T>::full(y.dims(), T::ONE);
    for (i, (&yv, &mv)) in y.data().iter().zip(mask.data().iter()).enumerate() {
        if mv.to_f64() != 0.0 && yv.to_f64() > cfg.anomaly_threshold {
            w.data_mut()[i] = T::from_f64(cfg.w_anom);
        }
    }
    w
}

pub(crate) mod kernels {
    use super::*;

    pub fn check_same<T: Scalar>(
        op: &'static str,
        a: &Tensor4<T>,
        b: &Tensor4<T>,
    ) -> Result<()> {
        if !a.same_dims(b) {
            return Err(Error::Shape {
                op,
                msg: format!("shape {:?} vs {:?}", a.dims(), b.dims()),
            });
        }
        Ok(())
    }

    pub fn mask_count<T: Scalar>(mask: &Tensor4<T>) -> Result<f64> {
        let n = mask.data().iter().filter(|m| m.to_f64() != 0.0).count();
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(n as f64)
    }

    /// Masked mean of the positive-weighted BCE, in the overflow-safe
    /// logit form. Skipped pixels (`m = 0`) are never touched.
    pub fn masked_bce_fwd<T: Scalar>(
        logits: &Tensor4<T>,
        target: &Tensor4<T>,
        mask: &Tensor4<T>,
        pos_weight: f64,
    ) -> Result<f64> {
        check_same("masked_bce", logits, target)?;
        check_same("masked_bce", logits, mask)?;
        let denom = mask_count(mask)?;
        let mut acc = 0.0f64;
        for ((&lv, &ov), &mv) in logits
            .data()
            .iter()
            .zip(target.data().iter())
            .zip(mask.data().iter())
        {
            if mv.to_f64() == 0.0 {
                continue;
            }
            let o = ov.to_f64();
            if o != 0.0 && o != 1.0 {
                return Err(Error::Data(format!(
                    "occurrence target must be 0 or 1 on valid pixels, got {o}"
                )));
            }
            let z = lv.to_f64();
            // -log(sigmoid(z)) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
            acc += if o == 1.0 {
                pos_weight * scalar::log1p_exp(-z)
            } else {
                scalar::log1p_exp(z)
            };
        }
        Ok(acc / denom)
    }

    pub fn masked_bce_grad<T: Scalar>(
        logits: &Tensor4<T>,
        target: &Tensor4<T>,
        mask: &Tensor4<T>,
        pos_weight: f64,
        upstream: f64,
    ) -> Tensor4<T> {
        let denom = mask
            .data()
            .iter()
            .filter(|m| m.to_f64() != 0.0)
            .count() as f64;
        let k = upstream / denom;
        let mut g = Tensor4::<T>::zeros(logits.dims());
        for (i, ((&lv, &ov), &mv)) in logits
            .data()
            .iter()
            .zip(target.data().iter())
            .zip(mask.data().iter())
            .enumerate()
        {
            if mv.to_f64() == 0.0 {
                continue;
            }
            let s = scalar::sigmoid(lv.to_f64());
            let d = if ov.to_f64() == 1.0 {
                -pos_weight * (1.0 - s)
            } else {
                s
            };
            g.data_mut()[i] = T::from_f64(k * d);
        }
        g
    }

    /// Masked weighted mean of `w (log(pred + eps) - log(target + eps))^2`.
    /// The denominator is `sum(m)`, not `sum(m w)`.
    pub fn masked_log_mse_fwd<T: Scalar>(
        pred: &Tensor4<T>,
        target: &Tensor4<T>,
        mask: &Tensor4<T>,
        weights: &Tensor4<T>,
        eps: f64,
    ) -> Result<f64> {
        check_same("masked_log_mse", pred, target)?;
        check_same("masked_log_mse", pred, mask)?;
        check_same("masked_log_mse", pred, weights)?;
        let denom = mask_count(mask)?;
        let mut acc = 0.0f64;
        for (i, (((&pv, &yv), &mv), &wv)) in pred
            .data()
            .iter()
            .zip(target.data().iter())
            .zip(mask.data().iter())
            .zip(weights.data().iter())
            .enumerate()
        {
            if mv.to_f64() == 0.0 {
                continue;
            }
            let pe = pv.to_f64() + eps;
            let ye = yv.to_f64() + eps;
            if !(pe > 0.0) || !pe.is_finite() {
                return Err(Error::Data(format!(
                    "log argument pred + eps = {pe} is not positive and finite at flat index {i}"
                )));
            }
            if !(ye > 0.0) || !ye.is_finite() {
                return Err(Error::Data(format!(
                    "log argument target + eps = {ye} is not positive and finite at flat index {i}"
                )));
            }
            let d = libm::log(pe) - libm::log(ye);
            acc += wv.to_f64() * d * d;
        }
        Ok(acc / denom)
    }

    pub fn masked_log_mse_grad<T: Scalar>(
        pred: &Tensor4<T>,
        target: &Tensor4<T>,
        mask: &Tensor4<T>,
        weights: &Tensor4<T>,
        eps: f64,
        upstream: f64,
    ) -> Tensor4<T> {
        let denom = mask
            .data()
            .iter()
            .filter(|m| m.to_f64() != 0.0)
            .count() as f64;
        let k = upstream / denom;
        let mut g = Tensor4::<T>::zeros(pred.dims());
        for (i, (((&pv, &yv), &mv), &wv)) in pred
            .data()
            .iter()
            .zip(target.data().iter())
            .zip(mask.data().iter())
            .zip(weights.data().iter())
            .enumerate()
        {
            if mv.to_f64() == 0.0 {
                continue;
            }
            let pe = pv.to_f64() + eps;
            let d = libm::log(pe) - libm::log(yv.to_f64() + eps);
            g.data_mut()[i] = T::from_f64(k * wv.to_f64() * 2.0 * d / pe);
        }
        g
    }
}

/// Masked positive-weighted binary cross-entropy (Eq. form: masked mean).
pub fn masked_bce<T: Scalar>(
    logits: &Tensor4<T>,
    target: &Tensor4<T>,
    mask: &Tensor4<T>,
    pos_weight: f64,
) -> Result<f64> {
    kernels::masked_bce_fwd(logits, target, mask, pos_weight)
}

/// Masked anomaly-weighted log-MSE against raw (unnormalized) flash density.
pub fn masked_log_mse<T: Scalar>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    mask: &Tensor4<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    let w = anomaly_weights(target, mask, cfg);
    kernels::masked_log_mse_fwd(pred, target, mask, &w, cfg.epsilon)
}

fn breakdown_counts<T: Scalar>(y: &Tensor4<T>, mask: &Tensor4<T>, cfg: &LossConfig) -> (u64, u64, u64) {
    let mut valid = 0;
    let mut positive = 0;
    let mut anomaly = 0;
    for (&yv, &mv) in y.data().iter().zip(mask.data().iter()) {
        if mv.to_f64() == 0.0 {
            continue;
        }
        valid += 1;
        let v = yv.to_f64();
        if v > 0.0 {
            positive += 1;
        }
        if v > cfg.anomaly_threshold {
            anomaly += 1;
        }
    }
    (valid, positive, anomaly)
}

/// Full objective without a tape: components, weighted total, and pixel counts.
pub fn total_loss<T: Scalar>(
    logits: &Tensor4<T>,
    magnitudes: &Tensor4<T>,
    y: &Tensor4<T>,
    mask: &Tensor4<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let occ = occurrence_target(y, mask)?;
    let cls = kernels::masked_bce_fwd(logits, &occ, mask, cfg.pos_weight)?;
    let w = anomaly_weights(y, mask, cfg);
    let reg = kernels::masked_log_mse_fwd(magnitudes, y, mask, &w, cfg.epsilon)?;
    let (valid_px, positive_px, anomaly_px) = breakdown_counts(y, mask, cfg);
    Ok(LossBreakdown {
        total: cfg.lambda_cls * cls + cfg.lambda_reg * reg,
        cls,
        reg,
        valid_px,
        positive_px,
        anomaly_px,
    })
}

/// Same objective recorded on a tape for backpropagation. Returns the scalar
/// loss variable and the detached breakdown.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &Tape<T>,
    logits: VarId,
    magnitudes: VarId,
    y: &Tensor4<T>,
    mask: &Tensor4<T>,
    cfg: &LossConfig,
) -> Result<(VarId, LossBreakdown)> {
    cfg.validate()?;
    let occ = occurrence_target(y, mask)?;
    let w = anomaly_weights(y, mask, cfg);
    let cls_var = tape.masked_bce_logits(logits, &occ, mask, cfg.pos_weight)?;
    let reg_var = tape.masked_log_mse(magnitudes, y, mask, &w, cfg.epsilon)?;
    let total = tape.add(
        tape.scale(cls_var, cfg.lambda_cls),
        tape.scale(reg_var, cfg.lambda_reg),
    )?;
    let cls = tape.value(cls_var).data()[0].to_f64();
    let reg = tape.value(reg_var).data()[0].to_f64();
    let (valid_px, positive_px, anomaly_px) = breakdown_counts(y, mask, cfg);
    Ok((
        total,
        LossBreakdown {
            total: cfg.lambda_cls * cls + cfg.lambda_reg * reg,
            cls,
            reg,
            valid_px,
            positive_px,
            anomaly_px,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::full(dims, 1.0)
    }

    #[test]
    fn bce_spot_values() {
        let d = [1, 1, 1, 1];
        let logits = Tensor4::zeros(d);
        let m = ones(d);
        let pos = Tensor4::full(d, 1.0);
        let neg = Tensor4::zeros(d);
        let l_pos = masked_bce(&logits, &pos, &m, 5.0).unwrap();
        let l_neg = masked_bce(&logits, &neg, &m, 5.0).unwrap();
        assert!((l_pos - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l_neg - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn log_mse_single_pixel_closed_form() {
        let d = [1, 1, 1, 1];
        let pred = Tensor4::full(d, 1.0);
        let target = Tensor4::zeros(d);
        let m = ones(d);
        let cfg = LossConfig::default();
        let got = masked_log_mse(&pred, &target, &m, &cfg).unwrap();
        let want = libm::log(1001.0).powi(2);
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn perfect_prediction_gives_zero_reg() {
        let d = [1, 1, 2, 3];
        let y = Tensor4::from_fn(d, |_, _, h, w| (h * 3 + w) as f64 * 0.25);
        let m = ones(d);
        let cfg = LossConfig::default();
        assert_eq!(masked_log_mse(&y, &y, &m, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let d = [1, 1, 2, 2];
        let z = Tensor4::<f64>::zeros(d);
        assert!(matches!(
            masked_bce(&z, &z, &z, 5.0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn occurrence_rejects_negative_valid_pixels() {
        let d = [1, 1, 1, 2];
        let y = Tensor4::new(d, vec![-0.5, 1.0]).unwrap();
        let m = ones(d);
        assert!(occurrence_target(&y, &m).is_err());
        // Same value masked out is fine.
        let m0 = Tensor4::new(d, vec![0.0, 1.0]).unwrap();
        let o = occurrence_target(&y, &m0).unwrap();
        assert_eq!(o.data(), &[0.0, 1.0]);
    }

    #[test]
    fn quantile_linear_interpolation() {
        let vals: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let t = anomaly_threshold(vals, 0.99).unwrap();
        assert!((t - 99.01).abs() < 1e-12);
    }

    #[test]
    fn quantile_constant_stream() {
        let t = anomaly_threshold(std::iter::repeat(4.25).take(17), 0.5).unwrap();
        assert_eq!(t, 4.25);
    }

    #[test]
    fn quantile_permutation_invariant() {
        let a: Vec<f64> = vec![5.0, 1.0, 9.0, 3.0, 7.0, 2.0];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            anomaly_threshold(a, 0.73).unwrap(),
            anomaly_threshold(b, 0.73).unwrap()
        );
    }

    #[test]
    fn quantile_rejects_empty_and_bad_q() {
        assert!(anomaly_threshold(std::iter::empty(), 0.5).is_err());
        assert!(anomaly_threshold(vec![1.0], 0.0).is_err());
        assert!(anomaly_threshold(vec![1.0], 1.0).is_err());
    }

    #[test]
    fn anomaly_pixel_contributes_w_anom_times_more() {
        let d = [1, 1, 1, 1];
        let m = ones(d);
        let pred = Tensor4::full(d, 2.0);
        let y = Tensor4::full(d, 10.0);
        let below = LossConfig {
            anomaly_threshold: 100.0,
            ..LossConfig::default()
        };
        let above = LossConfig {
            anomaly_threshold: 5.0,
            ..LossConfig::default()
        };
        let l_below = masked_log_mse(&pred, &y, &m, &below).unwrap();
        let l_above = masked_log_mse(&pred, &y, &m, &above).unwrap();
        assert!((l_above / l_below - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_weighting_is_exact() {
        let d = [1, 1, 2, 2];
        let logits = Tensor4::from_fn(d, |_, _, h, w| (h as f64 - w as f64) * 0.3);
        let mags = Tensor4::from_fn(d, |_, _, h, w| 0.5 + (h + w) as f64 * 0.1);
        let y = Tensor4::from_fn(d, |_, _, h, w| if (h + w) % 2 == 0 { 1.5 } else { 0.0 });
        let m = ones(d);
        let cfg = LossConfig {
            lambda_cls: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&logits, &mags, &y, &m, &cfg).unwrap();
        assert_eq!(b.total, b.reg);
        let cfg2 = LossConfig::default();
        let b2 = total_loss(&logits, &mags, &y, &m, &cfg2).unwrap();
        assert_eq!(b2.total, b2.cls + b2.reg);
        assert_eq!(b2.valid_px, 4);
        assert_eq!(b2.positive_px, 2);
    }
}
