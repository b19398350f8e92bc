//! Dense rank-4 tensor in `(batch, channel, height, width)` row-major layout.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `(B, C, H, W)` tensor with an optional gradient slot.
///
/// Values are stored contiguously in row-major `(B, C, H, W)` order. The
/// gradient, when present, mirrors the value layout exactly. Tensors are
/// immutable after construction except for gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Scalar> {
    dims: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expect = dims.iter().product::<usize>();
        if data.len() != expect {
            return Err(Error::Shape {
                op: "Tensor4::new",
                msg: format!(
                    "data length {} does not match dims {:?} (= {})",
                    data.len(),
                    dims,
                    expect
                ),
            });
        }
        Ok(Self {
            dims,
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::ZERO; dims.iter().product()],
            grad: None,
        }
    }

    pub fn full(dims: [usize; 4], v: T) -> Self {
        Self {
            dims,
            data: vec![v; dims.iter().product()],
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f(b, c, h, w)` at every cell.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self {
            dims,
            data,
            grad: None,
        }
    }

    /// Scalar tensor of shape (1, 1, 1, 1).
    pub fn scalar(v: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![v],
            grad: None,
        }
    }

    #[inline(always)]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline(always)]
    pub fn b(&self) -> usize {
        self.dims[0]
    }
    #[inline(always)]
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    #[inline(always)]
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    #[inline(always)]
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    #[inline(always)]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline(always)]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(b, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(b, c, h, w);
        self.data[i] = v;
    }

    #[inline(always)]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// One `(c, h, w)` sample slice of the underlying storage.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[b * n..(b + 1) * n]
    }

    /// One `(h, w)` plane of the underlying storage.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<T>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "Tensor4::set_grad",
                msg: format!("grad length {} != value length {}", g.len(), self.data.len()),
            });
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("Tensor4::add", other, |a, b| {
            T::from_f64(a.to_f64() + b.to_f64())
        })
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with("Tensor4::mul", other, |a, b| {
            T::from_f64(a.to_f64() * b.to_f64())
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| T::from_f64(v.to_f64() * c))
    }

    fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !self.same_dims(other) {
            return Err(Error::Shape {
                op,
                msg: format!("shape {:?} vs {:?}", self.dims, other.dims),
            });
        }
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    /// Casts every element through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}
