//! Unified forward execution: the same layer code runs either recorded on a
//! [`Tape`] (for training and gradient checks) or eagerly (inference, where
//! holding every intermediate activation alive would waste memory).

use std::rc::Rc;

use rand_chacha::ChaCha20Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor4;
use crate::{conv, ops};

/// A value flowing through a forward pass.
#[derive(Clone)]
pub enum Val<T: Scalar> {
    Tracked(VarId),
    Eager(Rc<Tensor4<T>>),
}

/// Forward execution context: tape-or-eager, plus training mode and the
/// random stream for stochastic depth.
pub struct Fwd<'a, T: Scalar> {
    tape: Option<&'a Tape<T>>,
    pub training: bool,
    rng: Option<&'a mut ChaCha20Rng>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    /// Inference context: eager, evaluation mode.
    pub fn eager() -> Self {
        Self {
            tape: None,
            training: false,
            rng: None,
        }
    }

    /// Recording context in evaluation mode (for gradient checks).
    pub fn taped(tape: &'a Tape<T>) -> Self {
        Self {
            tape: Some(tape),
            training: false,
            rng: None,
        }
    }

    /// Recording context in training mode.
    pub fn train(tape: &'a Tape<T>, rng: &'a mut ChaCha20Rng) -> Self {
        Self {
            tape: Some(tape),
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_taped(&self) -> bool {
        self.tape.is_some()
    }

    pub fn rng(&mut self) -> Result<&mut ChaCha20Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("stochastic layer requires a random stream".into()))
    }

    /// Lifts a constant tensor into the context.
    pub fn leaf(&self, t: &Tensor4<T>) -> Val<T> {
        match self.tape {
            Some(tape) => Val::Tracked(tape.input(t.clone())),
            None => Val::Eager(Rc::new(t.clone())),
        }
    }

    /// Lifts a trainable parameter. On a tape its gradient is retrievable by
    /// name after backward; eagerly it behaves like any constant.
    pub fn param(&self, name: &str, t: &Tensor4<T>) -> Val<T> {
        match self.tape {
            Some(tape) => Val::Tracked(tape.param(name, t.clone())),
            None => Val::Eager(Rc::new(t.clone())),
        }
    }

    /// Reads the concrete tensor behind a value.
    pub fn tensor(&self, v: &Val<T>) -> Rc<Tensor4<T>> {
        match v {
            Val::Tracked(id) => self.tape.expect("tracked value without tape").value(*id),
            Val::Eager(t) => Rc::clone(t),
        }
    }

    pub fn var(&self, v: &Val<T>) -> Result<VarId> {
        match v {
            Val::Tracked(id) => Ok(*id),
            Val::Eager(_) => Err(Error::Config(
                "tracked variable requested from an eager forward pass".into(),
            )),
        }
    }

    fn wrap(&self, t: Tensor4<T>) -> Val<T> {
        debug_assert!(self.tape.is_none());
        Val::Eager(Rc::new(t))
    }

    pub fn conv2d(
        &self,
        x: &Val<T>,
        w: &Val<T>,
        b: Option<&Val<T>>,
        spec: ConvSpec,
    ) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => {
                let b_id = match b {
                    Some(bv) => Some(self.var(bv)?),
                    None => None,
                };
                Ok(Val::Tracked(tape.conv2d(
                    self.var(x)?,
                    self.var(w)?,
                    b_id,
                    spec,
                )?))
            }
            None => {
                let bt = b.map(|bv| self.tensor(bv));
                Ok(self.wrap(conv::conv2d(
                    &self.tensor(x),
                    &self.tensor(w),
                    bt.as_deref(),
                    &spec,
                )?))
            }
        }
    }

    pub fn layer_norm_cf(
        &self,
        x: &Val<T>,
        scale: &Val<T>,
        shift: &Val<T>,
        eps: f64,
    ) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.layer_norm_cf(
                self.var(x)?,
                self.var(scale)?,
                self.var(shift)?,
                eps,
            )?)),
            None => Ok(self.wrap(ops::layer_norm_cf(
                &self.tensor(x),
                &self.tensor(scale),
                &self.tensor(shift),
                eps,
            )?)),
        }
    }

    pub fn gelu(&self, x: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.gelu(self.var(x)?))),
            None => Ok(self.wrap(ops::gelu(&self.tensor(x)))),
        }
    }

    pub fn relu(&self, x: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.relu(self.var(x)?))),
            None => Ok(self.wrap(ops::relu(&self.tensor(x)))),
        }
    }

    pub fn sigmoid(&self, x: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.sigmoid(self.var(x)?))),
            None => Ok(self.wrap(ops::sigmoid(&self.tensor(x)))),
        }
    }

    pub fn softplus(&self, x: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.softplus(self.var(x)?))),
            None => Ok(self.wrap(ops::softplus(&self.tensor(x)))),
        }
    }

    pub fn add(&self, a: &Val<T>, b: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.add(self.var(a)?, self.var(b)?)?)),
            None => Ok(self.wrap(self.tensor(a).add(&self.tensor(b))?)),
        }
    }

    pub fn mul(&self, a: &Val<T>, b: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.mul(self.var(a)?, self.var(b)?)?)),
            None => Ok(self.wrap(self.tensor(a).mul(&self.tensor(b))?)),
        }
    }

    pub fn scale(&self, x: &Val<T>, c: f64) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.scale(self.var(x)?, c))),
            None => Ok(self.wrap(self.tensor(x).scale(c))),
        }
    }

    pub fn mul_bcast(&self, x: &Val<T>, m: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.mul_bcast(self.var(x)?, self.var(m)?)?)),
            None => Ok(self.wrap(ops::mul_bcast(&self.tensor(x), &self.tensor(m))?)),
        }
    }

    pub fn global_avg_pool(&self, x: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.global_avg_pool(self.var(x)?)?)),
            None => Ok(self.wrap(ops::global_avg_pool(&self.tensor(x))?)),
        }
    }

    pub fn sum_all(&self, x: &Val<T>) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.sum_all(self.var(x)?))),
            None => {
                let t = self.tensor(x);
                let mut acc = 0.0f64;
                for v in t.data() {
                    acc += v.to_f64();
                }
                Ok(self.wrap(Tensor4::scalar(T::from_f64(acc))))
            }
        }
    }

    pub fn split_channels(&self, x: &Val<T>, sizes: &[usize]) -> Result<Vec<Val<T>>> {
        match self.tape {
            Some(tape) => Ok(tape
                .split_channels(self.var(x)?, sizes)?
                .into_iter()
                .map(Val::Tracked)
                .collect()),
            None => Ok(ops::split_channels(&self.tensor(x), sizes)?
                .into_iter()
                .map(|t| Val::Eager(Rc::new(t)))
                .collect()),
        }
    }

    pub fn concat_channels(&self, xs: &[Val<T>]) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => {
                let ids: Result<Vec<VarId>> = xs.iter().map(|v| self.var(v)).collect();
                Ok(Val::Tracked(tape.concat_channels(&ids?)?))
            }
            None => {
                let ts: Vec<Rc<Tensor4<T>>> = xs.iter().map(|v| self.tensor(v)).collect();
                let refs: Vec<&Tensor4<T>> = ts.iter().map(|t| t.as_ref()).collect();
                Ok(self.wrap(ops::concat_channels(&refs)?))
            }
        }
    }

    pub fn upsample_bilinear(&self, x: &Val<T>, oh: usize, ow: usize) -> Result<Val<T>> {
        match self.tape {
            Some(tape) => Ok(Val::Tracked(tape.upsample_bilinear(self.var(x)?, oh, ow)?)),
            None => Ok(self.wrap(ops::upsample_bilinear(&self.tensor(x), oh, ow)?)),
        }
    }
}
