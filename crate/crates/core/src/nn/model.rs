//! Layer graph and forward execution in real or fixed-point mode.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::conv::{conv2d, conv2d_fixed, ConvSpec};
use super::layers;
use crate::error::{Error, Result};
use crate::fxp::{self, QFormat};
use crate::scalar::Scalar;
use crate::ssd::{PriorConfig, HEAD_CHANNELS_PER_PRIOR};
use crate::tensor::{quantize_tensor, Activation, FixedTensor, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Real,
    Fixed,
}

/// Q-formats of one convolution: incoming activations, weights and the
/// written-back output. Biases live at the accumulator scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvFormats {
    pub input: QFormat,
    pub weight: QFormat,
    pub output: QFormat,
}

impl ConvFormats {
    pub fn bias_frac(&self) -> u32 {
        self.input.frac_bits() + self.weight.frac_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv(ConvSpec),
    Relu,
    MaxPool { window: usize, stride: usize },
    Softmax,
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv(_) => "conv",
            LayerOp::Relu => "relu",
            LayerOp::MaxPool { .. } => "maxpool",
            LayerOp::Softmax => "softmax",
        }
    }
}

/// Structure of one layer, independent of its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub formats: Option<ConvFormats>,
    /// Name under which this layer's output is exposed to the detection head.
    pub tap: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedConvParams {
    pub weights: FixedTensor,
    pub bias: Vec<i64>,
    pub bias_frac: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvParams<T> {
    Real { weights: Tensor<T>, bias: Vec<T> },
    Fixed(FixedConvParams),
}

impl<T: Scalar> ConvParams<T> {
    pub fn weight_shape(&self) -> Shape {
        match self {
            ConvParams::Real { weights, .. } => weights.shape(),
            ConvParams::Fixed(p) => p.weights.shape(),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            ConvParams::Real { bias, .. } => bias.len(),
            ConvParams::Fixed(p) => p.bias.len(),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, ConvParams::Fixed(_))
    }

    /// Real weights and bias; fixed parameters are dequantized exactly.
    pub fn real(&self) -> (Cow<'_, Tensor<T>>, Cow<'_, [T]>) {
        match self {
            ConvParams::Real { weights, bias } => (Cow::Borrowed(weights), Cow::Borrowed(bias.as_slice())),
            ConvParams::Fixed(p) => {
                let scale = (-(p.bias_frac as f64)).exp2();
                let bias = p.bias.iter().map(|&b| T::of(b as f64 * scale)).collect::<Vec<_>>();
                (Cow::Owned(p.weights.dequantize()), Cow::Owned(bias))
            }
        }
    }

    /// Parameters in the given formats, quantizing or rescaling as needed.
    pub fn fixed(&self, formats: &ConvFormats) -> Cow<'_, FixedConvParams> {
        let bias_frac = formats.bias_frac();
        match self {
            ConvParams::Fixed(p) if p.weights.format() == formats.weight && p.bias_frac == bias_frac => Cow::Borrowed(p),
            ConvParams::Fixed(p) => {
                let shift = bias_frac as i32 - p.bias_frac as i32;
                Cow::Owned(FixedConvParams {
                    weights: p.weights.requantize(formats.weight),
                    bias: p
                        .bias
                        .iter()
                        .map(|&b| fxp::shift_round(b as fxp::Acc, shift).clamp(i64::MIN as i128, i64::MAX as i128) as i64)
                        .collect(),
                    bias_frac,
                })
            }
            ConvParams::Real { weights, bias } => Cow::Owned(FixedConvParams {
                weights: quantize_tensor(weights, formats.weight),
                bias: bias.iter().map(|&b| fxp::quantize_wide(b, bias_frac)).collect(),
                bias_frac,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Option<ConvParams<T>>,
}

impl<T: Scalar> Layer<T> {
    fn plain(name: &str, op: LayerOp) -> Self {
        Layer {
            spec: LayerSpec {
                name: name.to_string(),
                op,
                formats: None,
                tap: None,
            },
            params: None,
        }
    }

    pub fn conv(name: &str, spec: ConvSpec, weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        if weights.shape() != spec.weight_shape() || bias.len() != spec.out_channels {
            return Err(Error::shape(
                name,
                format!(
                    "weights {} / bias {} do not match conv {}x{}x{}x{}",
                    weights.shape(),
                    bias.len(),
                    spec.out_channels,
                    spec.in_channels,
                    spec.kernel,
                    spec.kernel
                ),
            ));
        }
        let mut l = Layer::plain(name, LayerOp::Conv(spec));
        l.params = Some(ConvParams::Real { weights, bias });
        Ok(l)
    }

    pub fn relu(name: &str) -> Self {
        Layer::plain(name, LayerOp::Relu)
    }

    pub fn maxpool(name: &str, window: usize, stride: usize) -> Self {
        Layer::plain(name, LayerOp::MaxPool { window, stride })
    }

    pub fn softmax(name: &str) -> Self {
        Layer::plain(name, LayerOp::Softmax)
    }

    pub fn tapped(mut self, tap: &str) -> Self {
        self.spec.tap = Some(tap.to_string());
        self
    }

    pub fn with_formats(mut self, formats: ConvFormats) -> Self {
        self.spec.formats = Some(formats);
        self
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    fn run(&self, act: Activation<T>, mode: Mode) -> Result<Activation<T>> {
        Ok(match (&self.spec.op, mode) {
            (LayerOp::Conv(spec), Mode::Real) => {
                let params = self.params.as_ref().ok_or_else(|| Error::Manifest("conv layer without parameters".into()))?;
                let (w, b) = params.real();
                Activation::Real(conv2d(&act.to_real(), &w, &b, spec)?)
            }
            (LayerOp::Conv(spec), Mode::Fixed) => {
                let formats = self.spec.formats.ok_or_else(|| Error::MissingFormat(self.spec.name.clone()))?;
                let params = self.params.as_ref().ok_or_else(|| Error::Manifest("conv layer without parameters".into()))?;
                let p = params.fixed(&formats);
                let x = act.to_fixed(formats.input);
                Activation::Fixed(conv2d_fixed(&x, &p.weights, &p.bias, spec, formats.output)?)
            }
            (LayerOp::Relu, _) => match act {
                Activation::Real(t) => Activation::Real(layers::relu(&t)),
                Activation::Fixed(t) => Activation::Fixed(layers::relu_fixed(&t)),
            },
            (LayerOp::MaxPool { window, stride }, _) => match act {
                Activation::Real(t) => Activation::Real(layers::maxpool2d(&t, *window, *stride)?),
                Activation::Fixed(t) => Activation::Fixed(layers::maxpool2d_fixed(&t, *window, *stride)?),
            },
            (LayerOp::Softmax, _) => Activation::Real(layers::softmax_channels(&act.to_real())),
        })
    }
}

/// Output shape of a layer given its input shape.
pub fn layer_output_shape(op: &LayerOp, input: Shape) -> Result<Shape> {
    match op {
        LayerOp::Conv(spec) => spec.output_shape(input),
        LayerOp::Relu | LayerOp::Softmax => Ok(input),
        LayerOp::MaxPool { window, stride } => layers::pooled_shape(input, *window, *stride),
    }
}

/// Ordered layer graph with optional detection-head configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub input: Shape,
    pub mode: Mode,
    /// Format the input image is quantized into in fixed mode.
    pub input_format: Option<QFormat>,
    pub layers: Vec<Layer<T>>,
    pub head: Option<PriorConfig>,
}

/// One convolution as seen by planners: index, geometry and activation shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSite<'a> {
    pub index: usize,
    pub name: &'a str,
    pub spec: ConvSpec,
    pub input: Shape,
    pub output: Shape,
}

impl<T: Scalar> Model<T> {
    pub fn new(input: impl Into<Shape>) -> Self {
        Model {
            input: input.into(),
            mode: Mode::Real,
            input_format: None,
            layers: Vec::new(),
            head: None,
        }
    }

    pub fn push(mut self, layer: Layer<T>) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn with_head(mut self, head: PriorConfig) -> Self {
        self.head = Some(head);
        self
    }

    /// Output shape of every layer, following the chain from the input.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                shape = layer_output_shape(&l.spec.op, shape).map_err(|e| e.in_layer(i, &l.spec.name))?;
                Ok(shape)
            })
            .collect()
    }

    pub fn conv_sites(&self) -> Result<Vec<ConvSite<'_>>> {
        let shapes = self.layer_shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l.spec.op {
                LayerOp::Conv(spec) => Some(ConvSite {
                    index: i,
                    name: &l.spec.name,
                    spec,
                    input: if i == 0 { self.input } else { shapes[i - 1] },
                    output: shapes[i],
                }),
                _ => None,
            })
            .collect())
    }

    pub fn tap_shapes(&self) -> Result<BTreeMap<String, Shape>> {
        let shapes = self.layer_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes)
            .filter_map(|(l, s)| l.spec.tap.clone().map(|t| (t, s)))
            .collect())
    }

    /// Checks shape chaining, parameter shapes, tap references and the
    /// consistency of formats with the execution mode.
    pub fn validate(&self) -> Result<()> {
        self.layer_shapes()?;
        let mut names = BTreeSet::new();
        let mut taps = BTreeSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            let at = |e: Error| e.in_layer(i, &l.spec.name);
            if !names.insert(l.spec.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate layer name `{}`", l.spec.name)));
            }
            if let Some(t) = &l.spec.tap {
                if !taps.insert(t.as_str()) {
                    return Err(Error::Manifest(format!("duplicate tap name `{t}`")));
                }
            }
            match (&l.spec.op, &l.params) {
                (LayerOp::Conv(spec), Some(p)) => {
                    if p.weight_shape() != spec.weight_shape() || p.bias_len() != spec.out_channels {
                        return Err(at(Error::shape(
                            "conv parameters",
                            format!("weights {} / bias {}", p.weight_shape(), p.bias_len()),
                        )));
                    }
                    if let (ConvParams::Fixed(fp), Some(f)) = (p, &l.spec.formats) {
                        if fp.weights.format() != f.weight || fp.bias_frac != f.bias_frac() {
                            return Err(at(Error::Manifest(
                                "fixed parameters disagree with declared formats".into(),
                            )));
                        }
                    }
                    if self.mode == Mode::Fixed && (l.spec.formats.is_none() || !p.is_fixed()) {
                        return Err(at(Error::MissingFormat(l.spec.name.clone())));
                    }
                }
                (LayerOp::Conv(_), None) => return Err(at(Error::Manifest("conv layer without parameters".into()))),
                (_, Some(_)) => return Err(at(Error::Manifest("parameters on a non-conv layer".into()))),
                (_, None) => {}
            }
        }
        if self.mode == Mode::Fixed && self.input_format.is_none() {
            return Err(Error::MissingFormat("input".into()));
        }
        if let Some(head) = &self.head {
            head.validate()?;
            let shapes = self.tap_shapes()?;
            for tp in &head.taps {
                let shape = shapes.get(&tp.name).ok_or_else(|| Error::UnknownTap(tp.name.clone()))?;
                let channels = HEAD_CHANNELS_PER_PRIOR * tp.priors_per_cell();
                if shape.h != tp.grid_h || shape.w != tp.grid_w || shape.c != channels {
                    return Err(Error::shape(
                        format!("tap {}", tp.name),
                        format!(
                            "feature map {} does not match a {}x{} grid with {} channels",
                            shape, tp.grid_h, tp.grid_w, channels
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Tap outputs and the final activation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub taps: BTreeMap<String, Activation<T>>,
    pub output: Activation<T>,
}

/// Runs every layer in order, calling `visit` with each layer's output.
pub fn forward_visit<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    mode: Mode,
    mut visit: impl FnMut(usize, &Layer<T>, &Activation<T>),
) -> Result<Activation<T>> {
    if image.shape() != model.input {
        return Err(Error::shape(
            "forward",
            format!("image is {}, model expects {}", image.shape(), model.input),
        ));
    }
    let mut act = match mode {
        Mode::Real => Activation::Real(image.clone()),
        Mode::Fixed => {
            let q = model.input_format.ok_or_else(|| Error::MissingFormat("input".into()))?;
            Activation::Fixed(quantize_tensor(image, q))
        }
    };
    for (i, layer) in model.layers.iter().enumerate() {
        act = layer.run(act, mode).map_err(|e| e.in_layer(i, layer.name()))?;
        visit(i, layer, &act);
    }
    Ok(act)
}

/// Forward pass returning every tapped feature map plus the final output.
pub fn forward<T: Scalar>(model: &Model<T>, image: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
    let mut taps = BTreeMap::new();
    let output = forward_visit(model, image, mode, |_, layer, act| {
        if let Some(t) = &layer.spec.tap {
            taps.insert(t.clone(), act.clone());
        }
    })?;
    Ok(ForwardOutput { taps, output })
}
