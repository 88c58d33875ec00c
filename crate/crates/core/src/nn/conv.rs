//! Direct convolution over NCHW tensors.
//!
//! `output[m][r][c] = bias[m] + sum_n sum_i sum_j w[m][n][i][j] * x[n][S*r+i-P][S*c+j-P]`
//! with zero padding. Every path sums each output element in the same order:
//! bias first, then input channel, then kernel row, then kernel column.
//! This makes the real-mode result of the blocked path, the naive reference
//! and the tiled simulator exactly equal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp::{self, Acc, QFormat};
use crate::scalar::Scalar;
use crate::tensor::{FixedTensor, Shape, Tensor};

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((in + 2P - K) / S) + 1`, or `None` when the kernel does not fit.
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::shape("conv", "channel counts must be positive"));
        }
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv",
                format!("input has {} channels, layer expects {}", input.c, self.in_channels),
            ));
        }
        match (self.output_dim(input.h), self.output_dim(input.w)) {
            (Some(h), Some(w)) => Ok(Shape::new(input.n, self.out_channels, h, w)),
            _ => Err(Error::shape(
                "conv",
                format!(
                    "kernel {} stride {} padding {} does not fit input {}",
                    self.kernel, self.stride, self.padding, input
                ),
            )),
        }
    }

    /// Multiply-accumulates per output element.
    pub fn macs_per_output(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_params(&self, input: Shape, weights: Shape, bias_len: usize) -> Result<Shape> {
        let out = self.output_shape(input)?;
        if weights != self.weight_shape() {
            return Err(Error::shape(
                "conv",
                format!("weights are {}, expected {}", weights, self.weight_shape()),
            ));
        }
        if bias_len != self.out_channels {
            return Err(Error::shape(
                "conv",
                format!("bias has {} entries, expected {}", bias_len, self.out_channels),
            ));
        }
        Ok(out)
    }
}

/// Inclusive-exclusive kernel offsets whose input coordinate lands inside
/// `[0, extent)` for output coordinate `o`.
#[inline]
pub(crate) fn valid_taps(o: usize, stride: usize, padding: usize, kernel: usize, extent: usize) -> (usize, usize) {
    let origin = (o * stride) as isize - padding as isize;
    let lo = (-origin).max(0) as usize;
    let hi = (extent as isize - origin).clamp(0, kernel as isize) as usize;
    (lo.min(hi), hi)
}

/// Blocked kernel shared by the real and fixed paths. Each (image, output
/// channel) plane is computed independently, so the parallel split does not
/// affect results.
#[allow(clippy::too_many_arguments)]
fn conv_planes<I, A, O>(
    input: &[I],
    in_shape: Shape,
    weights: &[I],
    spec: &ConvSpec,
    out_shape: Shape,
    init: impl Fn(usize) -> A + Sync,
    mac: impl Fn(A, I, I) -> A + Sync,
    finish: impl Fn(A) -> O + Sync,
) -> Vec<O>
where
    I: Copy + Sync,
    A: Copy,
    O: Copy + Default + Send,
{
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let plane = out_shape.h * out_shape.w;
    let mut out = vec![O::default(); out_shape.len()];
    out.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, dst)| {
        let (n, m) = (idx / out_shape.c, idx % out_shape.c);
        let w_m = &weights[m * spec.in_channels * k * k..(m + 1) * spec.in_channels * k * k];
        for r in 0..out_shape.h {
            let (i_lo, i_hi) = valid_taps(r, s, p, k, in_shape.h);
            // Only read when the tap range is non-empty, which implies y0 >= 0.
            let y0 = (r * s + i_lo) as isize - p as isize;
            for c in 0..out_shape.w {
                let (j_lo, j_hi) = valid_taps(c, s, p, k, in_shape.w);
                let x0 = (c * s + j_lo) as isize - p as isize;
                let mut acc = init(m);
                for ch in 0..spec.in_channels {
                    let w_ch = &w_m[ch * k * k..(ch + 1) * k * k];
                    if j_lo == j_hi {
                        continue;
                    }
                    for (di, i) in (i_lo..i_hi).enumerate() {
                        let row = in_shape.index(n, ch, y0 as usize + di, x0 as usize);
                        let xs = &input[row..row + (j_hi - j_lo)];
                        let ws = &w_ch[i * k + j_lo..i * k + j_hi];
                        for (&wv, &xv) in ws.iter().zip(xs) {
                            acc = mac(acc, wv, xv);
                        }
                    }
                }
                dst[r * out_shape.w + c] = finish(acc);
            }
        }
    });
    out
}

/// Real-mode convolution (blocked, parallel over output planes).
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>> {
    let out_shape = spec.check_params(input.shape(), weights.shape(), bias.len())?;
    let data = conv_planes(
        input.data(),
        input.shape(),
        weights.data(),
        spec,
        out_shape,
        |m| bias[m],
        |acc, w, x| acc + w * x,
        |acc| acc,
    );
    Tensor::new(out_shape, data)
}

/// Fixed-point convolution. `bias` is at accumulator scale
/// (`input.frac_bits + weights.frac_bits`); sums are kept in an `i128`
/// accumulator and requantized once into `out_q`.
pub fn conv2d_fixed(
    input: &FixedTensor,
    weights: &FixedTensor,
    bias: &[i64],
    spec: &ConvSpec,
    out_q: QFormat,
) -> Result<FixedTensor> {
    let out_shape = spec.check_params(input.shape(), weights.shape(), bias.len())?;
    let (in_q, w_q) = (input.format(), weights.format());
    let data = conv_planes(
        input.raw().data(),
        input.shape(),
        weights.raw().data(),
        spec,
        out_shape,
        |m| bias[m] as Acc,
        |acc, w, x| acc + w as Acc * x as Acc,
        |acc| fxp::requantize_accumulator(acc, in_q, w_q, out_q),
    );
    Ok(FixedTensor::new_unchecked(Tensor::new(out_shape, data)?, out_q))
}

/// Naive six-loop reference. Out-of-bounds (padding) reads are skipped.
#[allow(clippy::needless_range_loop)]
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = spec.check_params(input.shape(), weights.shape(), bias.len())?;
    let in_shape = input.shape();
    let mut out = Tensor::zeros(out_shape);
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    for n in 0..out_shape.n {
        for m in 0..out_shape.c {
            for r in 0..out_shape.h {
                for c in 0..out_shape.w {
                    let mut acc = bias[m];
                    for ch in 0..spec.in_channels {
                        for i in 0..k {
                            for j in 0..k {
                                let y = s * r as isize + i - p;
                                let x = s * c as isize + j - p;
                                if y < 0 || x < 0 || y >= in_shape.h as isize || x >= in_shape.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + *weights.at(m, ch, i as usize, j as usize)
                                        * *input.at(n, ch, y as usize, x as usize);
                            }
                        }
                    }
                    let idx = out_shape.index(n, m, r, c);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Naive reference for the fixed-point path.
#[allow(clippy::needless_range_loop)]
pub fn conv2d_fixed_reference(
    input: &FixedTensor,
    weights: &FixedTensor,
    bias: &[i64],
    spec: &ConvSpec,
    out_q: QFormat,
) -> Result<FixedTensor> {
    let out_shape = spec.check_params(input.shape(), weights.shape(), bias.len())?;
    let in_shape = input.shape();
    let (x_raw, w_raw) = (input.raw(), weights.raw());
    let mut out = Vec::with_capacity(out_shape.len());
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    for n in 0..out_shape.n {
        for m in 0..out_shape.c {
            for r in 0..out_shape.h {
                for c in 0..out_shape.w {
                    let mut acc = bias[m] as Acc;
                    for ch in 0..spec.in_channels {
                        for i in 0..k {
                            for j in 0..k {
                                let y = s * r as isize + i - p;
                                let x = s * c as isize + j - p;
                                let xv = if y < 0 || x < 0 || y >= in_shape.h as isize || x >= in_shape.w as isize {
                                    0
                                } else {
                                    *x_raw.at(n, ch, y as usize, x as usize)
                                };
                                acc += *w_raw.at(m, ch, i as usize, j as usize) as Acc * xv as Acc;
                            }
                        }
                    }
                    out.push(fxp::requantize_accumulator(acc, input.format(), weights.format(), out_q));
                }
            }
        }
    }
    Ok(FixedTensor::new_unchecked(Tensor::new(out_shape, out)?, out_q))
}
