//! Dense NCHW tensors.

use std::fmt;

use num_traits::ToPrimitive;

use crate::error::{Error, Result};
use crate::fxp::{self, QFormat};
use crate::scalar::Scalar;

/// Extents of an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW storage with element type `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E> Tensor<E> {
    pub fn new(shape: impl Into<Shape>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for shape {}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> &E {
        &self.data[self.shape.index(n, c, h, w)]
    }

    pub fn map<F, U>(&self, f: F) -> Tensor<U>
    where
        F: FnMut(&E) -> U,
    {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }
}

impl<E: Clone> Tensor<E> {
    pub fn filled(shape: impl Into<Shape>, value: E) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Tensor::filled(shape, T::zero())
    }

    /// Elementwise conversion to another real scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.as_f64()))
    }
}

/// Raw two's-complement values tagged with the format they are expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedTensor {
    raw: Tensor<i32>,
    q: QFormat,
}

impl FixedTensor {
    pub fn new(raw: Tensor<i32>, q: QFormat) -> Result<Self> {
        if let Some(v) = raw.data().iter().find(|&&v| !q.contains_raw(v as i64)) {
            return Err(Error::InvalidArgument(format!(
                "raw value {v} outside the {q} range [{}, {}]",
                q.raw_min(),
                q.raw_max()
            )));
        }
        Ok(FixedTensor { raw, q })
    }

    pub(crate) fn new_unchecked(raw: Tensor<i32>, q: QFormat) -> Self {
        debug_assert!(raw.data().iter().all(|&v| q.contains_raw(v as i64)));
        FixedTensor { raw, q }
    }

    pub fn format(&self) -> QFormat {
        self.q
    }

    pub fn raw(&self) -> &Tensor<i32> {
        &self.raw
    }

    pub fn shape(&self) -> Shape {
        self.raw.shape()
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        self.raw.map(|&v| T::of(fxp::dequantize_value(v, self.q)))
    }

    /// Re-expresses the tensor in another format (rounded, saturating).
    pub fn requantize(&self, to: QFormat) -> FixedTensor {
        if to == self.q {
            return self.clone();
        }
        let shift = to.frac_bits() as i32 - self.q.frac_bits() as i32;
        let raw = self.raw.map(|&v| to.saturate(fxp::shift_round(v as fxp::Acc, shift)));
        FixedTensor { raw, q: to }
    }
}

/// Elementwise quantization of a real tensor; the shape is preserved.
pub fn quantize_tensor<T: ToPrimitive + Copy>(t: &Tensor<T>, q: QFormat) -> FixedTensor {
    FixedTensor {
        raw: t.map(|&v| fxp::quantize_value(v, q)),
        q,
    }
}

/// A feature map as it flows through the graph: real or fixed-point.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation<T> {
    Real(Tensor<T>),
    Fixed(FixedTensor),
}

impl<T: Scalar> Activation<T> {
    pub fn shape(&self) -> Shape {
        match self {
            Activation::Real(t) => t.shape(),
            Activation::Fixed(t) => t.shape(),
        }
    }

    /// Real view; fixed tensors are dequantized exactly.
    pub fn to_real(&self) -> Tensor<T> {
        match self {
            Activation::Real(t) => t.clone(),
            Activation::Fixed(t) => t.dequantize(),
        }
    }

    /// Fixed view in `q`; real tensors are quantized, fixed ones re-expressed.
    pub fn to_fixed(&self, q: QFormat) -> FixedTensor {
        match self {
            Activation::Real(t) => quantize_tensor(t, q),
            Activation::Fixed(t) => t.requantize(q),
        }
    }

    pub fn as_fixed(&self) -> Option<&FixedTensor> {
        match self {
            Activation::Fixed(t) => Some(t),
            Activation::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> Option<&Tensor<T>> {
        match self {
            Activation::Real(t) => Some(t),
            Activation::Fixed(_) => None,
        }
    }
}
