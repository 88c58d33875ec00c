//! Elementwise and pooling layers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FixedTensor, Shape, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|&v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU on raw values: a sign test, no rescaling.
pub fn relu_fixed(input: &FixedTensor) -> FixedTensor {
    FixedTensor::new_unchecked(input.raw().map(|&v| v.max(0)), input.format())
}

pub fn pooled_shape(input: Shape, window: usize, stride: usize) -> Result<Shape> {
    if window == 0 || stride == 0 {
        return Err(Error::shape("maxpool", "window and stride must be positive"));
    }
    if window > input.h || window > input.w {
        return Err(Error::shape(
            "maxpool",
            format!("window {window} larger than input {input}"),
        ));
    }
    Ok(Shape::new(
        input.n,
        input.c,
        (input.h - window) / stride + 1,
        (input.w - window) / stride + 1,
    ))
}

fn pool<E: Copy + PartialOrd>(input: &Tensor<E>, window: usize, stride: usize) -> Result<Tensor<E>> {
    let out = pooled_shape(input.shape(), window, stride)?;
    Ok(Tensor::from_fn(out, |n, c, r, col| {
        let mut best = *input.at(n, c, r * stride, col * stride);
        for i in 0..window {
            for j in 0..window {
                let v = *input.at(n, c, r * stride + i, col * stride + j);
                if v > best {
                    best = v;
                }
            }
        }
        best
    }))
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    pool(input, window, stride)
}

/// Max pooling commutes with the monotone raw-to-real map, so raws are
/// pooled directly.
pub fn maxpool2d_fixed(input: &FixedTensor, window: usize, stride: usize) -> Result<FixedTensor> {
    Ok(FixedTensor::new_unchecked(pool(input.raw(), window, stride)?, input.format()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let Some(max) = scores.iter().copied().reduce(T::max) else {
        return Vec::new();
    };
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax across channels at every spatial position.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let mut out = input.clone();
    let mut column = Vec::with_capacity(s.c);
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                column.clear();
                column.extend((0..s.c).map(|c| *input.at(n, c, h, w)));
                for (c, v) in softmax(&column).into_iter().enumerate() {
                    let idx = s.index(n, c, h, w);
                    out.data_mut()[idx] = v;
                }
            }
        }
    }
    out
}
