//! Deterministic AdamW training loop with epoch-seeded shuffling,
//! validation-based best-checkpoint selection, and structured per-epoch
//! records.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, NormStats, Splits};
use crate::error::{Error, Result};
use crate::fwd::Fwd;
use crate::loss::{total_loss, total_loss_on_tape, LossBreakdown, LossConfig};
use crate::model::{forward, forward_eval, init_params, ModelConfig, ModelParams};
use crate::optim::{adamw_step, clip_grad_norm, OptimConfig, OptimState};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Pixel-weighted aggregate of loss breakdowns over many batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossAgg {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub valid_px: u64,
    pub positive_px: u64,
    pub anomaly_px: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossAccum {
    total_w: f64,
    cls_w: f64,
    reg_w: f64,
    valid: u64,
    positive: u64,
    anomaly: u64,
}

impl LossAccum {
    pub fn add(&mut self, bd: &LossBreakdown) {
        let w = bd.valid_px as f64;
        self.total_w += bd.total * w;
        self.cls_w += bd.cls * w;
        self.reg_w += bd.reg * w;
        self.valid += bd.valid_px;
        self.positive += bd.positive_px;
        self.anomaly += bd.anomaly_px;
    }

    pub fn finish(&self) -> LossAgg {
        let w = (self.valid as f64).max(1.0);
        LossAgg {
            total: self.total_w / w,
            cls: self.cls_w / w,
            reg: self.reg_w / w,
            valid_px: self.valid,
            positive_px: self.positive,
            anomaly_px: self.anomaly,
        }
    }
}

/// One line of the newline-delimited JSON training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossAgg,
    pub val: LossAgg,
    pub best_val: f64,
    pub wall_time_s: f64,
}

/// Borrowed view of the training state handed to the per-epoch callback.
pub struct TrainSnapshot<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
    pub optim: &'a OptimState<T>,
    /// 1-based epoch just finished.
    pub epoch: usize,
    pub best_val: f64,
    pub is_best: bool,
}

/// State needed to continue a run from an epoch boundary.
pub struct ResumeState<T: Scalar> {
    pub params: ModelParams<T>,
    pub optim: OptimState<T>,
    /// 0-based index of the next epoch to run.
    pub next_epoch: usize,
    pub best_val: f64,
}

pub struct TrainResult<T: Scalar> {
    pub final_params: ModelParams<T>,
    pub final_state: OptimState<T>,
    pub best_params: ModelParams<T>,
    pub best_val: f64,
    /// 1-based epoch of the best validation loss (0 if none improved).
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

fn epoch_rng(seed: u64, epoch: usize, lane: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + lane);
    rng
}

/// Average loss of a split under the current parameters (evaluation mode).
pub fn evaluate_split_loss<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    params: &ModelParams<T>,
    stats: &NormStats,
    loss_cfg: &LossConfig,
) -> Result<LossAgg> {
    if indices.is_empty() {
        return Err(Error::Config("loss evaluation over an empty split".into()));
    }
    let mut acc = LossAccum::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y, m) = make_batch::<T>(ds, chunk, stats)?;
        let (logits, mags) = forward_eval(params, &x)?;
        let bd = total_loss(&logits, &mags, &y, &m, loss_cfg)?;
        acc.add(&bd);
    }
    Ok(acc.finish())
}

/// Runs the training recipe: per epoch, shuffle training days with the
/// epoch-seeded stream, take AdamW steps over batches, evaluate validation
/// loss, and retain the best checkpoint. The callback fires after every
/// epoch with a state snapshot (for checkpointing).
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    ds: &Dataset,
    splits: &Splits,
    stats: &NormStats,
    model_cfg: &ModelConfig,
    optim_cfg: &OptimConfig,
    loss_cfg: &LossConfig,
    resume: Option<ResumeState<T>>,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainSnapshot<'_, T>) -> Result<()>,
) -> Result<TrainResult<T>> {
    model_cfg.validate()?;
    optim_cfg.validate()?;
    loss_cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if splits.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let (mut params, mut state, start_epoch, mut best_val) = match resume {
        Some(r) => (r.params, r.optim, r.next_epoch, r.best_val),
        None => {
            let p = init_params::<T>(model_cfg, optim_cfg.seed)?;
            let s = OptimState::init(&p);
            (p, s, 0, f64::INFINITY)
        }
    };
    if start_epoch >= optim_cfg.epochs {
        return Err(Error::Config(format!(
            "resume epoch {start_epoch} is not before configured epochs {}",
            optim_cfg.epochs
        )));
    }
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut records = Vec::new();

    for epoch in start_epoch..optim_cfg.epochs {
        let t0 = Instant::now();
        let lr_t = optim_cfg.lr_at(epoch);
        let mut order = splits.train.clone();
        order.shuffle(&mut epoch_rng(optim_cfg.seed, epoch, 0));
        let mut dp_rng = epoch_rng(optim_cfg.seed, epoch, 1);

        let mut train_acc = LossAccum::default();
        for chunk in order.chunks(optim_cfg.batch_size) {
            let (x, y, m) = make_batch::<T>(ds, chunk, stats)?;
            let tape = Tape::<T>::new();
            let bd = {
                let mut cx = Fwd::train(&tape, &mut dp_rng);
                let (logits, mags) = forward(&mut cx, &params, &x)?;
                let (loss_var, bd) = total_loss_on_tape(
                    &tape,
                    cx.var(&logits)?,
                    cx.var(&mags)?,
                    &y,
                    &m,
                    loss_cfg,
                )?;
                if !bd.total.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite training loss {} at epoch {}",
                        bd.total,
                        epoch + 1
                    )));
                }
                tape.backward(loss_var)?;
                bd
            };
            let mut grads = tape.param_grads();
            if let Some(max_norm) = optim_cfg.grad_clip_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            adamw_step(&mut params, &grads, &mut state, optim_cfg, lr_t)?;
            train_acc.add(&bd);
        }

        let val = evaluate_split_loss(
            ds,
            &splits.val,
            optim_cfg.batch_size,
            &params,
            stats,
            loss_cfg,
        )?;
        let is_best = val.total < best_val;
        if is_best {
            best_val = val.total;
            best_params = params.clone();
            best_epoch = epoch + 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: lr_t,
            train: train_acc.finish(),
            val,
            best_val,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        on_epoch(
            &record,
            &TrainSnapshot {
                params: &params,
                optim: &state,
                epoch: epoch + 1,
                best_val,
                is_best,
            },
        )?;
        records.push(record);
    }

    Ok(TrainResult {
        final_params: params,
        final_state: state,
        best_params,
        best_val,
        best_epoch,
        records,
    })
}
