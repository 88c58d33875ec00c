//! Loop tiling model of a convolution accelerator.
//!
//! A convolution is computed output-stationary in tiles of
//! `Tm` output channels x `Tn` input channels x `Tr` rows x `Tc` columns:
//!
//! ```text
//! for each row tile, column tile, output-channel tile:
//!     output buffer <- bias
//!     for each input-channel tile:
//!         weight buffer <- weights[m-tile][n-tile]   (unless already resident)
//!         input buffer  <- inputs[n-tile][row/col window] (unless already resident)
//!         accumulate into the output buffer
//!     write the output buffer back
//! ```
//!
//! Each on-chip buffer holds one tile. A request for the tile already held
//! is served without external traffic; the traffic model counts exactly
//! the transfers this schedule makes. Edge tiles are charged at full tile
//! size.

mod sim;

pub use sim::{simulate_tiled_conv, simulate_tiled_conv_fixed, OnChipBuffer, TrafficEvent, TrafficKind, TrafficLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Model};
use crate::scalar::Scalar;
use crate::tensor::Shape;

/// Resources of the target device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatformBudget {
    pub on_chip_buffer_bytes: u64,
    pub mac_units: u64,
    pub clock_hz: f64,
    pub dram_bandwidth_bytes_per_s: f64,
    pub element_bytes: u64,
}

impl PlatformBudget {
    pub fn validate(&self) -> Result<()> {
        let ok = self.on_chip_buffer_bytes > 0
            && self.mac_units > 0
            && self.element_bytes > 0
            && self.clock_hz.is_finite()
            && self.clock_hz > 0.0
            && self.dram_bandwidth_bytes_per_s.is_finite()
            && self.dram_bandwidth_bytes_per_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("platform budget must be positive: {self:?}")))
        }
    }
}

/// Loop bounds of one convolution: `M` out channels, `N` in channels,
/// `K` kernel, `S` stride, `P` padding, `R x C` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub r: usize,
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn new(spec: &ConvSpec, input: Shape) -> Result<Self> {
        let out = spec.output_shape(input)?;
        Ok(ConvGeometry {
            m: spec.out_channels,
            n: spec.in_channels,
            k: spec.kernel,
            s: spec.stride,
            p: spec.padding,
            r: out.h,
            c: out.w,
            in_h: input.h,
            in_w: input.w,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.m, self.n, self.k, self.s, self.p)
    }

    /// Rows of input needed for `tr` output rows.
    pub fn input_rows(&self, tr: usize) -> usize {
        self.s * tr + self.k - self.s
    }

    pub fn input_cols(&self, tc: usize) -> usize {
        self.s * tc + self.k - self.s
    }
}

/// `2 * M * N * K^2 * R * C` (one multiply and one add per MAC).
pub fn layer_ops(g: &ConvGeometry) -> u64 {
    2 * (g.m * g.n * g.k * g.k * g.r * g.c) as u64
}

/// Iterations between reuses of one element when a loop of `extent`
/// iterations is blocked by `block`: `ceil(extent / block)`.
pub fn reuse_distance(extent: u64, block: u64) -> Result<u64> {
    if block == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    Ok(extent.div_ceil(block))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TilePlan {
    pub tm: usize,
    pub tn: usize,
    pub tr: usize,
    pub tc: usize,
}

/// Trip counts of the four tile loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trips {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Footprint {
    pub input: u64,
    pub weight: u64,
    pub output: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.input + self.weight + self.output
    }
}

impl TilePlan {
    pub fn new(tm: usize, tn: usize, tr: usize, tc: usize) -> Self {
        TilePlan { tm, tn, tr, tc }
    }

    pub fn whole_layer(g: &ConvGeometry) -> Self {
        TilePlan::new(g.m, g.n, g.r, g.c)
    }

    pub fn check_bounds(&self, g: &ConvGeometry) -> Result<()> {
        let fits = |t: usize, e: usize| (1..=e).contains(&t);
        if fits(self.tm, g.m) && fits(self.tn, g.n) && fits(self.tr, g.r) && fits(self.tc, g.c) {
            Ok(())
        } else {
            Err(Error::InvalidPlan(format!(
                "tiles {self:?} outside layer bounds M={} N={} R={} C={}",
                g.m, g.n, g.r, g.c
            )))
        }
    }

    /// Bounds, buffer capacity and MAC-array limits.
    pub fn validate(&self, g: &ConvGeometry, platform: &PlatformBudget) -> Result<()> {
        self.check_bounds(g)?;
        let fp = self.footprint(g, platform.element_bytes).total();
        if fp > platform.on_chip_buffer_bytes {
            return Err(Error::InvalidPlan(format!(
                "footprint {fp} B exceeds on-chip buffer {} B",
                platform.on_chip_buffer_bytes
            )));
        }
        if (self.tm * self.tn) as u64 > platform.mac_units {
            return Err(Error::InvalidPlan(format!(
                "Tm*Tn = {} exceeds {} MAC units",
                self.tm * self.tn,
                platform.mac_units
            )));
        }
        Ok(())
    }

    pub fn trips(&self, g: &ConvGeometry) -> Trips {
        Trips {
            m: g.m.div_ceil(self.tm),
            n: g.n.div_ceil(self.tn),
            r: g.r.div_ceil(self.tr),
            c: g.c.div_ceil(self.tc),
        }
    }

    pub fn footprint(&self, g: &ConvGeometry, elem: u64) -> Footprint {
        Footprint {
            input: (self.tn * g.input_rows(self.tr) * g.input_cols(self.tc)) as u64 * elem,
            weight: (self.tm * self.tn * g.k * g.k) as u64 * elem,
            output: (self.tm * self.tr * self.tc) as u64 * elem,
        }
    }
}

/// External-memory traffic of one layer under a plan, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Traffic {
    pub input_bytes: u64,
    pub weight_bytes: u64,
    pub output_bytes: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.input_bytes + self.weight_bytes + self.output_bytes
    }
}

/// Tile fetch counts of the output-stationary schedule with single-tile
/// residency: `(input fetches, weight fetches, output writes)`.
pub fn transfer_counts(t: &Trips) -> (u64, u64, u64) {
    let spatial = (t.r * t.c) as u64;
    let inner = (t.m * t.n) as u64;
    // The input tag (n, r, c) repeats across the m loop only when there is
    // one n tile; the weight tag (m, n) never changes when both are single.
    let inputs = if t.n == 1 { spatial } else { spatial * inner };
    let weights = if inner == 1 { 1 } else { spatial * inner };
    (inputs, weights, spatial * t.m as u64)
}

pub fn estimate_traffic(g: &ConvGeometry, plan: &TilePlan, elem: u64) -> Result<Traffic> {
    plan.check_bounds(g)?;
    let fp = plan.footprint(g, elem);
    let (inputs, weights, outputs) = transfer_counts(&plan.trips(g));
    Ok(Traffic {
        input_bytes: inputs * fp.input,
        weight_bytes: weights * fp.weight,
        output_bytes: outputs * fp.output,
    })
}

/// Operations per byte of external traffic.
pub fn ctc_ratio(g: &ConvGeometry, plan: &TilePlan, elem: u64) -> Result<f64> {
    let traffic = estimate_traffic(g, plan, elem)?;
    Ok(layer_ops(g) as f64 / traffic.total() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RooflineEstimate {
    /// ops/s the MAC array can sustain.
    pub computational_roof: f64,
    /// ops per external byte.
    pub ctc_ratio: f64,
    /// ops/s the memory system can feed.
    pub bandwidth_bound: f64,
    pub attainable: f64,
}

impl RooflineEstimate {
    pub fn new(computational_roof: f64, ctc_ratio: f64, bandwidth: f64) -> Self {
        let bandwidth_bound = bandwidth * ctc_ratio;
        RooflineEstimate {
            computational_roof,
            ctc_ratio,
            bandwidth_bound,
            attainable: computational_roof.min(bandwidth_bound),
        }
    }

    pub fn is_bandwidth_bound(&self) -> bool {
        self.bandwidth_bound < self.computational_roof
    }
}

pub fn attainable_performance(g: &ConvGeometry, plan: &TilePlan, platform: &PlatformBudget) -> Result<RooflineEstimate> {
    let ctc = ctc_ratio(g, plan, platform.element_bytes)?;
    let lanes = ((plan.tm * plan.tn) as u64).min(platform.mac_units) as f64;
    Ok(RooflineEstimate::new(
        2.0 * lanes * platform.clock_hz,
        ctc,
        platform.dram_bandwidth_bytes_per_s,
    ))
}

/// Divisors of `n` in ascending order (always includes `n`).
pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Tile plans the planner considers: divisor-aligned factors on every axis.
pub fn candidate_plans(g: &ConvGeometry) -> Vec<TilePlan> {
    let (dm, dn, dr, dc) = (divisors(g.m), divisors(g.n), divisors(g.r), divisors(g.c));
    let mut out = Vec::with_capacity(dm.len() * dn.len() * dr.len() * dc.len());
    for &tm in &dm {
        for &tn in &dn {
            for &tr in &dr {
                for &tc in &dc {
                    out.push(TilePlan::new(tm, tn, tr, tc));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanChoice {
    pub plan: TilePlan,
    pub estimate: RooflineEstimate,
    pub footprint: Footprint,
    pub traffic: Traffic,
}

/// Orders choices best-first: higher attainable, then higher CTC, then
/// smaller footprint, then lexicographically smaller tiles.
fn better(a: &PlanChoice, b: &PlanChoice) -> std::cmp::Ordering {
    b.estimate
        .attainable
        .total_cmp(&a.estimate.attainable)
        .then(b.estimate.ctc_ratio.total_cmp(&a.estimate.ctc_ratio))
        .then(a.footprint.total().cmp(&b.footprint.total()))
        .then(a.plan.cmp(&b.plan))
}

/// Evaluates one plan against the platform, or `None` when infeasible.
pub fn evaluate_plan(g: &ConvGeometry, plan: TilePlan, platform: &PlatformBudget) -> Option<PlanChoice> {
    plan.validate(g, platform).ok()?;
    Some(PlanChoice {
        plan,
        estimate: attainable_performance(g, &plan, platform).ok()?,
        footprint: plan.footprint(g, platform.element_bytes),
        traffic: estimate_traffic(g, &plan, platform.element_bytes).ok()?,
    })
}

/// Exhaustive search over divisor-aligned tile factors.
pub fn select_best_plan(g: &ConvGeometry, platform: &PlatformBudget, layer: &str) -> Result<PlanChoice> {
    platform.validate()?;
    candidate_plans(g)
        .into_iter()
        .filter_map(|p| evaluate_plan(g, p, platform))
        .min_by(better)
        .ok_or_else(|| {
            let minimal = TilePlan::new(1, 1, 1, 1).footprint(g, platform.element_bytes).total();
            Error::Infeasible {
                layer: layer.to_string(),
                detail: format!(
                    "smallest tile needs {minimal} B on chip, budget is {} B",
                    platform.on_chip_buffer_bytes
                ),
            }
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub geometry: ConvGeometry,
    pub ops: u64,
    pub choice: PlanChoice,
    /// Seconds, compute and traffic only.
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub layers: Vec<LayerPlan>,
    /// Sum of per-layer latencies, layers run back to back.
    pub latency_s: f64,
}

/// Plans every convolution of a model independently.
pub fn plan_model<T: Scalar>(model: &Model<T>, platform: &PlatformBudget) -> Result<ModelPlan> {
    let layers = model
        .conv_sites()?
        .into_iter()
        .map(|site| {
            let g = ConvGeometry::new(&site.spec, site.input)?;
            let choice = select_best_plan(&g, platform, site.name)?;
            let ops = layer_ops(&g);
            Ok(LayerPlan {
                name: site.name.to_string(),
                geometry: g,
                ops,
                latency_s: ops as f64 / choice.estimate.attainable,
                choice,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let latency_s = layers.iter().map(|l| l.latency_s).sum();
    Ok(ModelPlan { layers, latency_s })
}
