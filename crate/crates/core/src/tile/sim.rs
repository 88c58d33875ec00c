//! Tile-by-tile execution of a convolution with instrumented buffers.

use crate::error::{Error, Result};
use crate::fxp::{self, Acc, QFormat};
use crate::nn::{valid_taps, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::{FixedTensor, Shape, Tensor};

use super::{ConvGeometry, TilePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrafficKind {
    InputRead,
    WeightRead,
    OutputWrite,
}

/// One external transfer. `tile` holds the (m, n, r, c) tile indices;
/// axes that do not apply to the transfer are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficEvent {
    pub kind: TrafficKind,
    pub tile: [usize; 4],
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLog {
    pub events: Vec<TrafficEvent>,
    pub input_bytes: u64,
    pub weight_bytes: u64,
    pub output_bytes: u64,
    /// Largest sum of resident bytes across all buffers at any point.
    pub peak_resident_bytes: u64,
}

impl TrafficLog {
    fn record(&mut self, kind: TrafficKind, tile: [usize; 4], bytes: u64) {
        match kind {
            TrafficKind::InputRead => self.input_bytes += bytes,
            TrafficKind::WeightRead => self.weight_bytes += bytes,
            TrafficKind::OutputWrite => self.output_bytes += bytes,
        }
        self.events.push(TrafficEvent { kind, tile, bytes });
    }

    pub fn total(&self) -> u64 {
        self.input_bytes + self.weight_bytes + self.output_bytes
    }

    pub fn count(&self, kind: TrafficKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

/// A single-tile on-chip buffer. It remembers which tile it holds and
/// reloads only when a different tile is requested.
#[derive(Debug, Clone)]
pub struct OnChipBuffer<E> {
    name: &'static str,
    capacity: u64,
    elem_bytes: u64,
    tag: Option<[usize; 4]>,
    data: Vec<E>,
}

impl<E: Copy + Default> OnChipBuffer<E> {
    pub fn new(name: &'static str, capacity: u64, elem_bytes: u64) -> Self {
        OnChipBuffer {
            name,
            capacity,
            elem_bytes,
            tag: None,
            data: Vec::new(),
        }
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn resident_bytes(&self) -> u64 {
        self.data.len() as u64 * self.elem_bytes
    }

    /// Makes `tag` resident, filling `len` elements with `fill` if it is not
    /// already held. Returns whether a transfer happened.
    pub fn request(&mut self, tag: [usize; 4], len: usize, fill: impl FnOnce(&mut [E])) -> Result<bool> {
        if self.tag == Some(tag) {
            return Ok(false);
        }
        self.reset(len)?;
        fill(&mut self.data);
        self.tag = Some(tag);
        Ok(true)
    }

    /// Clears the buffer to `len` default elements without recording a tag.
    pub fn reset(&mut self, len: usize) -> Result<()> {
        let requested = len as u64 * self.elem_bytes;
        if requested > self.capacity {
            return Err(Error::BufferOverflow {
                buffer: self.name,
                requested,
                capacity: self.capacity,
            });
        }
        self.tag = None;
        self.data.clear();
        self.data.resize(len, E::default());
        Ok(())
    }
}

/// Runs the tiled schedule. `init(m)` seeds an accumulator with the bias of
/// output channel `m`, `mac` accumulates one product and `finish` produces
/// the stored output element.
#[allow(clippy::too_many_arguments)]
fn simulate<I, A, O>(
    g: &ConvGeometry,
    plan: &TilePlan,
    elem_bytes: u64,
    input: &[I],
    weights: &[I],
    init: impl Fn(usize) -> A,
    mac: impl Fn(A, I, I) -> A,
    finish: impl Fn(A) -> O,
) -> Result<(Vec<O>, TrafficLog)>
where
    I: Copy + Default,
    A: Copy + Default,
    O: Copy + Default,
{
    plan.check_bounds(g)?;
    let fp = plan.footprint(g, elem_bytes);
    let trips = plan.trips(g);
    let (k, s, p) = (g.k, g.s, g.p);
    let (tile_rows, tile_cols) = (g.input_rows(plan.tr), g.input_cols(plan.tc));

    let mut in_buf = OnChipBuffer::<I>::new("input", fp.input, elem_bytes);
    let mut w_buf = OnChipBuffer::<I>::new("weight", fp.weight, elem_bytes);
    let mut out_buf = OnChipBuffer::<A>::new("output", fp.output, elem_bytes);
    let mut log = TrafficLog::default();
    let mut out = vec![O::default(); g.m * g.r * g.c];

    for rt in 0..trips.r {
        let r0 = rt * plan.tr;
        let rows = plan.tr.min(g.r - r0);
        for ct in 0..trips.c {
            let c0 = ct * plan.tc;
            let cols = plan.tc.min(g.c - c0);
            for mt in 0..trips.m {
                let m0 = mt * plan.tm;
                let ms = plan.tm.min(g.m - m0);
                out_buf.reset(plan.tm * plan.tr * plan.tc)?;
                for (mm, row) in out_buf.data_mut().chunks_mut(plan.tr * plan.tc).take(ms).enumerate() {
                    row.fill(init(m0 + mm));
                }
                for nt in 0..trips.n {
                    let n0 = nt * plan.tn;
                    let ns = plan.tn.min(g.n - n0);

                    let fetched = w_buf.request([mt, nt, 0, 0], plan.tm * plan.tn * k * k, |buf| {
                        for mm in 0..ms {
                            for nn in 0..ns {
                                let src = ((m0 + mm) * g.n + n0 + nn) * k * k;
                                let dst = (mm * plan.tn + nn) * k * k;
                                buf[dst..dst + k * k].copy_from_slice(&weights[src..src + k * k]);
                            }
                        }
                    })?;
                    if fetched {
                        log.record(TrafficKind::WeightRead, [mt, nt, 0, 0], fp.weight);
                    }

                    // Input window origin in unpadded coordinates.
                    let y_org = (r0 * s) as isize - p as isize;
                    let x_org = (c0 * s) as isize - p as isize;
                    let fetched = in_buf.request([0, nt, rt, ct], plan.tn * tile_rows * tile_cols, |buf| {
                        for nn in 0..ns {
                            for ty in 0..tile_rows {
                                let y = y_org + ty as isize;
                                if y < 0 || y >= g.in_h as isize {
                                    continue;
                                }
                                for tx in 0..tile_cols {
                                    let x = x_org + tx as isize;
                                    if x < 0 || x >= g.in_w as isize {
                                        continue;
                                    }
                                    buf[(nn * tile_rows + ty) * tile_cols + tx] =
                                        input[((n0 + nn) * g.in_h + y as usize) * g.in_w + x as usize];
                                }
                            }
                        }
                    })?;
                    if fetched {
                        log.record(TrafficKind::InputRead, [0, nt, rt, ct], fp.input);
                    }

                    log.peak_resident_bytes = log
                        .peak_resident_bytes
                        .max(in_buf.resident_bytes() + w_buf.resident_bytes() + out_buf.resident_bytes());

                    let (xs, ws) = (in_buf.data(), w_buf.data());
                    let acc = out_buf.data_mut();
                    for mm in 0..ms {
                        for rr in 0..rows {
                            let (i_lo, i_hi) = valid_taps(r0 + rr, s, p, k, g.in_h);
                            for cc in 0..cols {
                                let (j_lo, j_hi) = valid_taps(c0 + cc, s, p, k, g.in_w);
                                let slot = (mm * plan.tr + rr) * plan.tc + cc;
                                let mut a = acc[slot];
                                for nn in 0..ns {
                                    let w_base = (mm * plan.tn + nn) * k * k;
                                    for i in i_lo..i_hi {
                                        let x_row = (nn * tile_rows + rr * s + i) * tile_cols + cc * s;
                                        for j in j_lo..j_hi {
                                            a = mac(a, ws[w_base + i * k + j], xs[x_row + j]);
                                        }
                                    }
                                }
                                acc[slot] = a;
                            }
                        }
                    }
                }

                for mm in 0..ms {
                    for rr in 0..rows {
                        for cc in 0..cols {
                            let a = out_buf.data()[(mm * plan.tr + rr) * plan.tc + cc];
                            out[((m0 + mm) * g.r + r0 + rr) * g.c + c0 + cc] = finish(a);
                        }
                    }
                }
                log.record(TrafficKind::OutputWrite, [mt, 0, rt, ct], fp.output);
            }
        }
    }
    Ok((out, log))
}

fn single_image(spec: &ConvSpec, input: Shape, weights: Shape, bias_len: usize) -> Result<ConvGeometry> {
    if input.n != 1 {
        return Err(Error::shape("tiled conv", format!("expects one image, got {}", input)));
    }
    if weights != spec.weight_shape() || bias_len != spec.out_channels {
        return Err(Error::shape(
            "tiled conv",
            format!("weights {weights} / bias {bias_len} do not match {:?}", spec),
        ));
    }
    ConvGeometry::new(spec, input)
}

/// Real-mode tiled convolution. The result equals [`crate::nn::conv2d`]
/// exactly.
pub fn simulate_tiled_conv<T: Scalar>(
    spec: &ConvSpec,
    plan: &TilePlan,
    elem_bytes: u64,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<(Tensor<T>, TrafficLog)> {
    let g = single_image(spec, input.shape(), weights.shape(), bias.len())?;
    let (data, log) = simulate(
        &g,
        plan,
        elem_bytes,
        input.data(),
        weights.data(),
        |m| bias[m],
        |a, w, x| a + w * x,
        |a| a,
    )?;
    Ok((Tensor::new([1, g.m, g.r, g.c], data)?, log))
}

/// Fixed-point tiled convolution. The result equals
/// [`crate::nn::conv2d_fixed`] bit for bit.
pub fn simulate_tiled_conv_fixed(
    spec: &ConvSpec,
    plan: &TilePlan,
    elem_bytes: u64,
    input: &FixedTensor,
    weights: &FixedTensor,
    bias: &[i64],
    out_q: QFormat,
) -> Result<(FixedTensor, TrafficLog)> {
    let g = single_image(spec, input.shape(), weights.shape(), bias.len())?;
    let (in_q, w_q) = (input.format(), weights.format());
    let (data, log) = simulate(
        &g,
        plan,
        elem_bytes,
        input.raw().data(),
        weights.raw().data(),
        |m| bias[m] as Acc,
        |a, w, x| a + w as Acc * x as Acc,
        |a| fxp::requantize_accumulator(a, in_q, w_q, out_q),
    )?;
    Ok((FixedTensor::new_unchecked(Tensor::new([1, g.m, g.r, g.c], data)?, out_q), log))
}
