//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! Operations append nodes to a Wengert list; `backward` replays the list in
//! reverse, visiting each node exactly once. Inputs always have smaller ids
//! than their outputs, so reverse id order is a valid reverse topological
//! order. Backward over one tape is single-threaded.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::loss::kernels as loss_kernels;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvSpec,
    },
    LayerNorm {
        x: VarId,
        scale: VarId,
        shift: VarId,
        eps: f64,
    },
    Gelu(VarId),
    Relu(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    MulBcast {
        x: VarId,
        m: VarId,
    },
    AvgPool(VarId),
    SumAll(VarId),
    /// One output channel range of a split; `c0` is the first channel.
    SplitChannel {
        x: VarId,
        c0: usize,
    },
    ConcatChannel(Vec<VarId>),
    Upsample(VarId),
    MaskedBce {
        logits: VarId,
        target: Rc<Tensor4<T>>,
        mask: Rc<Tensor4<T>>,
        pos_weight: f64,
    },
    MaskedLogMse {
        pred: VarId,
        target: Rc<Tensor4<T>>,
        mask: Rc<Tensor4<T>>,
        weights: Rc<Tensor4<T>>,
        eps: f64,
    },
}

struct Inner<T: Scalar> {
    vals: Vec<Rc<Tensor4<T>>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor4<T>>>,
    params: Vec<(String, VarId)>,
}

/// Wengert-list tape owning every recorded value.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                vals: Vec::new(),
                ops: Vec::new(),
                needs_grad: Vec::new(),
                grads: Vec::new(),
                params: Vec::new(),
            }),
        }
    }

    fn push(&self, value: Tensor4<T>, op: Op<T>, needs: bool) -> VarId {
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(Rc::new(value));
        inner.ops.push(op);
        inner.needs_grad.push(needs);
        VarId(inner.vals.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|v| inner.needs_grad[v.0])
    }

    /// Registers a constant leaf (no gradient tracked).
    pub fn input(&self, value: Tensor4<T>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf. Its gradient is retrievable by name after
    /// `backward`.
    pub fn param(&self, name: &str, value: Tensor4<T>) -> VarId {
        let id = self.push(value, Op::Leaf, true);
        self.inner.borrow_mut().params.push((name.to_string(), id));
        id
    }

    pub fn value(&self, v: VarId) -> Rc<Tensor4<T>> {
        Rc::clone(&self.inner.borrow().vals[v.0])
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of the last `backward` call w.r.t. the given variable.
    pub fn grad(&self, v: VarId) -> Option<Tensor4<T>> {
        self.inner.borrow().grads.get(v.0).and_then(|g| g.clone())
    }

    /// `(name, grad)` for every registered parameter, in registration order.
    /// Parameters untouched by the loss get a zero gradient.
    pub fn param_grads(&self) -> Vec<(String, Tensor4<T>)> {
        let inner = self.inner.borrow();
        inner
            .params
            .iter()
            .map(|(name, id)| {
                let g = inner
                    .grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor4::zeros(inner.vals[id.0].dims()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn conv2d(
        &self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvSpec,
    ) -> Result<VarId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|id| self.value(id));
        let out = conv::conv2d(&xv, &wv, bv.as_deref(), &spec)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs(&ids);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, needs))
    }

    pub fn layer_norm_cf(
        &self,
        x: VarId,
        scale: VarId,
        shift: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let out = ops::layer_norm_cf(&self.value(x), &self.value(scale), &self.value(shift), eps)?;
        let needs = self.needs(&[x, scale, shift]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                eps,
            },
            needs,
        ))
    }

    pub fn gelu(&self, x: VarId) -> VarId {
        let out = ops::gelu(&self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn relu(&self, x: VarId) -> VarId {
        let out = ops::relu(&self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&self, x: VarId) -> VarId {
        let out = ops::sigmoid(&self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn softplus(&self, x: VarId) -> VarId {
        let out = ops::softplus(&self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Softplus(x), needs)
    }

    pub fn add(&self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).add(&self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).mul(&self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&self, x: VarId, c: f64) -> VarId {
        let out = self.value(x).scale(c);
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn mul_bcast(&self, x: VarId, m: VarId) -> Result<VarId> {
        let out = ops::mul_bcast(&self.value(x), &self.value(m))?;
        let needs = self.needs(&[x, m]);
        Ok(self.push(out, Op::MulBcast { x, m }, needs))
    }

    pub fn global_avg_pool(&self, x: VarId) -> Result<VarId> {
        let out = ops::global_avg_pool(&self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool(x), needs))
    }

    /// Sum of every entry, as a scalar variable.
    pub fn sum_all(&self, x: VarId) -> VarId {
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.to_f64();
        }
        let needs = self.needs(&[x]);
        self.push(Tensor4::scalar(T::from_f64(acc)), Op::SumAll(x), needs)
    }

    pub fn split_channels(&self, x: VarId, sizes: &[usize]) -> Result<Vec<VarId>> {
        let parts = ops::split_channels(&self.value(x), sizes)?;
        let needs = self.needs(&[x]);
        let mut ids = Vec::with_capacity(parts.len());
        let mut c0 = 0;
        for part in parts {
            let c = part.c();
            ids.push(self.push(part, Op::SplitChannel { x, c0 }, needs));
            c0 += c;
        }
        Ok(ids)
    }

    pub fn concat_channels(&self, xs: &[VarId]) -> Result<VarId> {
        let vals: Vec<Rc<Tensor4<T>>> = xs.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor4<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat_channels(&refs)?;
        let needs = self.needs(xs);
        Ok(self.push(out, Op::ConcatChannel(xs.to_vec()), needs))
    }

    pub fn upsample_bilinear(&self, x: VarId, oh: usize, ow: usize) -> Result<VarId> {
        let out = ops::upsample_bilinear(&self.value(x), oh, ow)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample(x), needs))
    }

    /// Masked positive-weighted BCE against a constant target/mask pair;
    /// yields a scalar variable.
    pub fn masked_bce_logits(
        &self,
        logits: VarId,
        target: &Tensor4<T>,
        mask: &Tensor4<T>,
        pos_weight: f64,
    ) -> Result<VarId> {
        let lv = self.value(logits);
        let loss = loss_kernels::masked_bce_fwd(&lv, target, mask, pos_weight)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(loss)),
            Op::MaskedBce {
                logits,
                target: Rc::new(target.clone()),
                mask: Rc::new(mask.clone()),
                pos_weight,
            },
            needs,
        ))
    }

    /// Masked anomaly-weighted log-MSE against constant target/mask/weights;
    /// yields a scalar variable.
    pub fn masked_log_mse(
        &self,
        pred: VarId,
        target: &Tensor4<T>,
        mask: &Tensor4<T>,
        weights: &Tensor4<T>,
        eps: f64,
    ) -> Result<VarId> {
        let pv = self.value(pred);
        let loss = loss_kernels::masked_log_mse_fwd(&pv, target, mask, weights, eps)?;
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(loss)),
            Op::MaskedLogMse {
                pred,
                target: Rc::new(target.clone()),
                mask: Rc::new(mask.clone()),
                weights: Rc::new(weights.clone()),
                eps,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar variable. Gradients of all
    /// gradient-requiring variables become available afterwards.
    pub fn backward(&self, loss: VarId) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let n = inner.vals.len();
        if inner.vals[loss.0].dims() != [1, 1, 1, 1] {
            return Err(Error::Shape {
                op: "Tape::backward",
                msg: format!(
                    "loss must be a (1,1,1,1) scalar, got {:?}",
                    inner.vals[loss.0].dims()
                ),
            });
        }
        inner.grads = vec![None; n];
        inner.grads[loss.0] = Some(Tensor4::scalar(T::ONE));
        for id in (0..=loss.0).rev() {
            if inner.grads[id].is_none() || matches!(inner.ops[id], Op::Leaf) {
                continue;
            }
            let inner = &mut *inner;
            let (head, tail) = inner.grads.split_at_mut(id);
            let gout = tail[0].as_ref().unwrap();
            let vals = &inner.vals;
            let ng = &inner.needs_grad;
            match &inner.ops[id] {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, spec } => {
                    if ng[x.0] {
                        let g = conv::conv2d_grad_input(&vals[w.0], gout, vals[x.0].dims(), spec)?;
                        accumulate(&mut head[x.0], g)?;
                    }
                    if ng[w.0] {
                        let g =
                            conv::conv2d_grad_kernel(&vals[x.0], gout, vals[w.0].dims(), spec)?;
                        accumulate(&mut head[w.0], g)?;
                    }
                    if let Some(b) = b {
                        if ng[b.0] {
                            accumulate(&mut head[b.0], conv::conv2d_grad_bias(gout))?;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    scale,
                    shift,
                    eps,
                } => {
                    let (gx, gscale, gshift) =
                        ops::layer_norm_cf_backward(&vals[x.0], &vals[scale.0], gout, *eps);
                    if ng[x.0] {
                        accumulate(&mut head[x.0], gx)?;
                    }
                    if ng[scale.0] {
                        accumulate(&mut head[scale.0], gscale)?;
                    }
                    if ng[shift.0] {
                        accumulate(&mut head[shift.0], gshift)?;
                    }
                }
                Op::Gelu(x) => {
                    if ng[x.0] {
                        accumulate(&mut head[x.0], ops::gelu_backward(&vals[x.0], gout))?;
                    }
                }
                Op::Relu(x) => {
                    if ng[x.0] {
                        accumulate(&mut head[x.0], ops::relu_backward(&vals[x.0], gout))?;
                    }
                }
                Op::Sigmoid(x) => {
                    if ng[x.0] {
                        accumulate(&mut head[x.0], ops::sigmoid_backward(&vals[x.0], gout))?;
                    }
                }
                Op::Softplus(x) => {
                    if ng[x.0] {
                        accumulate(&mut head[x.0], ops::softplus_backward(&vals[x.0], gout))?;
                    }
                }
                Op::Add(a, b) => {
                    if ng[a.0] {
                        accumulate(&mut head[a.0], gout.clone())?;
                    }
                    if ng[b.0] {
                        accumulate(&mut head[b.0], gout.clone())?;
                    }
                }
                Op::Mul(a, b) => {
                    if ng[a.0] {
                        accumulate(&mut head[a.0], gout.mul(&vals[b.0])?)?;
                    }
                    if ng[b.0] {
                        accumulate(&mut head[b.0], gout.mul(&vals[a.0])?)?;
                    }
                }
                Op::Scale(x, c) => {
                    if ng[x.0] {
                        accumulate(&mut head[x.0], gout.scale(*c))?;
                    }
                }
                Op::MulBcast { x, m } => {
                    let (gx, gm) = ops::mul_bcast_backward(&vals[x.0], &vals[m.0], gout);
                    if ng[x.0] {
                        accumulate(&mut head[x.0], gx)?;
                    }
                    if ng[m.0] {
                        accumulate(&mut head[m.0], gm)?;
                    }
                }
                Op::AvgPool(x) => {
                    if ng[x.0] {
                        accumulate(
                            &mut head[x.0],
                            ops::global_avg_pool_backward(vals[x.0].dims(), gout),
                        )?;
                    }
                }
                Op::SumAll(x) => {
                    if ng[x.0] {
                        let g = gout.data()[0];
                        accumulate(&mut head[x.0], Tensor4::full(vals[x.0].dims(), g))?;
                    }
                }
                Op::SplitChannel { x, c0 } => {
                    if ng[x.0] {
                        let mut gx = Tensor4::<T>::zeros(vals[x.0].dims());
                        for bi in 0..gout.b() {
                            for ci in 0..gout.c() {
                                gx.plane_mut(bi, c0 + ci).copy_from_slice(gout.plane(bi, ci));
                            }
                        }
                        accumulate(&mut head[x.0], gx)?;
                    }
                }
                Op::ConcatChannel(xs) => {
                    let mut c0 = 0;
                    for xv in xs {
                        let c = vals[xv.0].c();
                        if ng[xv.0] {
                            let mut gx = Tensor4::<T>::zeros(vals[xv.0].dims());
                            for bi in 0..gout.b() {
                                for ci in 0..c {
                                    gx.plane_mut(bi, ci)
                                        .copy_from_slice(gout.plane(bi, c0 + ci));
                                }
                            }
                            accumulate(&mut head[xv.0], gx)?;
                        }
                        c0 += c;
                    }
                }
                Op::Upsample(x) => {
                    if ng[x.0] {
                        accumulate(
                            &mut head[x.0],
                            ops::upsample_bilinear_backward(vals[x.0].dims(), gout),
                        )?;
                    }
                }
                Op::MaskedBce {
                    logits,
                    target,
                    mask,
                    pos_weight,
                } => {
                    if ng[logits.0] {
                        let up = gout.data()[0].to_f64();
                        let g = loss_kernels::masked_bce_grad(
                            &vals[logits.0],
                            target,
                            mask,
                            *pos_weight,
                            up,
                        );
                        accumulate(&mut head[logits.0], g)?;
                    }
                }
                Op::MaskedLogMse {
                    pred,
                    target,
                    mask,
                    weights,
                    eps,
                } => {
                    if ng[pred.0] {
                        let up = gout.data()[0].to_f64();
                        let g = loss_kernels::masked_log_mse_grad(
                            &vals[pred.0],
                            target,
                            mask,
                            weights,
                            *eps,
                            up,
                        );
                        accumulate(&mut head[pred.0], g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(existing) => *existing = existing.add(&g)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_chain_grads() {
        // f = sum-like scalar via mul of scalars: f = (a + b) * a
        let tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor4::scalar(3.0));
        let b = tape.param("b", Tensor4::scalar(4.0));
        let s = tape.add(a, b).unwrap();
        let f = tape.mul(s, a).unwrap();
        tape.backward(f).unwrap();
        // df/da = (a + b) + a = 10, df/db = a = 3
        assert_eq!(tape.grad(a).unwrap().data()[0], 10.0);
        assert_eq!(tape.grad(b).unwrap().data()[0], 3.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor4::zeros([1, 2, 1, 1]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn constant_inputs_get_no_grad() {
        let tape = Tape::<f64>::new();
        let a = tape.input(Tensor4::scalar(2.0));
        let b = tape.param("b", Tensor4::scalar(5.0));
        let f = tape.mul(a, b).unwrap();
        tape.backward(f).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap().data()[0], 2.0);
    }

    #[test]
    fn split_concat_backward_restores_layout() {
        let tape = Tape::<f64>::new();
        let x = tape.param(
            "x",
            Tensor4::from_fn([1, 4, 1, 1], |_, c, _, _| c as f64 + 1.0),
        );
        let parts = tape.split_channels(x, &[1, 3]).unwrap();
        let doubled = tape.scale(parts[1], 2.0);
        let back = tape.concat_channels(&[parts[0], doubled]).unwrap();
        // scalarize: split into singles and add them up
        let singles = tape.split_channels(back, &[1, 1, 1, 1]).unwrap();
        let mut acc = singles[0];
        for s in &singles[1..] {
            acc = tape.add(acc, *s).unwrap();
        }
        tape.backward(acc).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 2.0, 2.0]);
    }
}
