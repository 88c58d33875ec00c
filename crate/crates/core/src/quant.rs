//! Post-training calibration: observe ranges on sample images, pick one
//! Q-format per tensor at a uniform width, and convert the model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, GroundTruthBox};
use crate::fxp::{derive_qformat, DynamicRange, QFormat};
use crate::nn::{forward_visit, ConvFormats, ConvParams, LayerOp, Mode, Model};
use crate::scalar::Scalar;
use crate::ssd::{run_detector, DetectParams, Detection};
use crate::tensor::Tensor;

/// Calibration set size used when none is given.
pub const DEFAULT_CALIBRATION_IMAGES: usize = 100;
pub const DEFAULT_WIDTH: u32 = 16;

/// Ranges and formats of one convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub name: String,
    pub weight_range: DynamicRange,
    pub bias_range: DynamicRange,
    /// Range of the activation entering the layer.
    pub input_range: DynamicRange,
    /// Range of the stored feature map: the conv output after any directly
    /// following ReLU / max-pool, up to the first tapped layer.
    pub feature_range: DynamicRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_format: Option<QFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<QFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_format: Option<QFormat>,
}

impl LayerCalibration {
    /// Union of the weight and bias ranges.
    pub fn parameter_range(&self) -> DynamicRange {
        self.weight_range.merge(self.bias_range)
    }

    pub fn formats(&self) -> Option<ConvFormats> {
        Some(ConvFormats {
            input: self.input_format?,
            weight: self.weight_format?,
            output: self.activation_format?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub image_range: DynamicRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_format: Option<QFormat>,
    pub layers: Vec<LayerCalibration>,
}

impl CalibrationReport {
    pub fn is_complete(&self) -> bool {
        self.image_format.is_some() && self.layers.iter().all(|l| l.formats().is_some())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCalibration> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("calibration report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let report: CalibrationReport =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("calibration report: {e}")))?;
        if report.samples == 0 {
            return Err(Error::InvalidArgument("calibration report with zero samples".into()));
        }
        Ok(report)
    }
}

/// Per-layer output ranges of a set of forward passes, plus the image range.
#[derive(Debug, Clone)]
struct Observed {
    image: Option<DynamicRange>,
    layers: Vec<Option<DynamicRange>>,
}

impl Observed {
    fn merge(mut self, other: Observed) -> Observed {
        self.image = DynamicRange::merge_opt(self.image, other.image);
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            *a = DynamicRange::merge_opt(*a, b);
        }
        self
    }
}

fn observe<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Observed> {
    let mut layers = vec![None; model.layers.len()];
    forward_visit(model, image, Mode::Real, |i, _, act| {
        layers[i] = DynamicRange::of(act.to_real().data());
    })?;
    Ok(Observed {
        image: DynamicRange::of(image.data()),
        layers,
    })
}

/// Index of the layer whose output holds the stored feature map of the
/// conv at `conv`.
fn feature_site<T>(model: &Model<T>, conv: usize) -> usize {
    let mut site = conv;
    while model.layers[site].spec.tap.is_none() {
        match model.layers.get(site + 1).map(|l| &l.spec.op) {
            Some(LayerOp::Relu | LayerOp::MaxPool { .. }) => site += 1,
            _ => break,
        }
    }
    site
}

fn nonempty(r: Option<DynamicRange>, what: &str) -> Result<DynamicRange> {
    r.ok_or_else(|| Error::Empty(format!("no values observed for {what}")))
}

/// Runs the real-mode model over every image (in parallel) and records the
/// ranges of parameters and feature maps. Formats are left unset.
pub fn extract_dynamic_range<T: Scalar>(model: &Model<T>, images: &[Tensor<T>]) -> Result<CalibrationReport> {
    if images.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    model.validate()?;
    let observed = images
        .par_iter()
        .map(|img| observe(model, img))
        .try_reduce_with(|a, b| Ok(a.merge(b)))
        .expect("non-empty calibration set")?;

    let mut layers = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if !matches!(layer.spec.op, LayerOp::Conv(_)) {
            continue;
        }
        let name = layer.name();
        let params = layer
            .params
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("conv layer `{name}` without parameters")))?;
        let (w, b) = params.real();
        let input_range = if i == 0 { observed.image } else { observed.layers[i - 1] };
        layers.push(LayerCalibration {
            name: name.to_string(),
            weight_range: nonempty(DynamicRange::of(w.data()), &format!("{name} weights"))?,
            bias_range: nonempty(DynamicRange::of(&b), &format!("{name} bias"))?,
            input_range: nonempty(input_range, &format!("{name} input"))?,
            feature_range: nonempty(observed.layers[feature_site(model, i)], &format!("{name} output"))?,
            weight_format: None,
            input_format: None,
            activation_format: None,
        });
    }
    Ok(CalibrationReport {
        samples: images.len(),
        image_range: nonempty(observed.image, "input images")?,
        width: None,
        image_format: None,
        layers,
    })
}

/// Chooses every format at one `width`. A conv's input format is the
/// format its input was stored in: the image format for the first layer and
/// the previous conv's activation format after that. Only when a softmax
/// intervenes is it derived from the observed input range.
pub fn allocate_qformats<T: Scalar>(model: &Model<T>, report: &CalibrationReport, width: u32) -> Result<CalibrationReport> {
    let mut out = report.clone();
    out.width = Some(width);
    let image_q = derive_qformat(report.image_range, width, "input image")?;
    out.image_format = Some(image_q);
    let mut current = Some(image_q);
    let mut next = 0;
    for layer in &model.layers {
        match layer.spec.op {
            LayerOp::Conv(_) => {
                let cal = out.layers.get_mut(next).filter(|c| c.name == layer.name()).ok_or_else(|| {
                    Error::InvalidArgument(format!("calibration report has no entry for layer `{}`", layer.name()))
                })?;
                next += 1;
                let name = &cal.name;
                cal.weight_format = Some(derive_qformat(cal.weight_range, width, &format!("{name} weights"))?);
                cal.input_format = Some(match current {
                    Some(q) => q,
                    None => derive_qformat(cal.input_range, width, &format!("{name} input"))?,
                });
                let act = derive_qformat(cal.feature_range, width, &format!("{name} features"))?;
                cal.activation_format = Some(act);
                current = Some(act);
            }
            LayerOp::Softmax => current = None,
            LayerOp::Relu | LayerOp::MaxPool { .. } => {}
        }
    }
    if next != out.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration report has {} layers, model has {} convolutions",
            out.layers.len(),
            next
        )));
    }
    Ok(out)
}

/// Converts weights and biases to fixed point with the report's formats and
/// switches the model to fixed mode. Biases are stored at the accumulator
/// scale. Applying it to an already converted model with the same report
/// leaves the model unchanged.
pub fn quantize_model<T: Scalar>(model: &Model<T>, report: &CalibrationReport) -> Result<Model<T>> {
    if !report.is_complete() {
        return Err(Error::InvalidArgument("calibration report has no formats; allocate them first".into()));
    }
    let mut out = model.clone();
    let mut entries = report.layers.iter();
    for layer in &mut out.layers {
        if !matches!(layer.spec.op, LayerOp::Conv(_)) {
            continue;
        }
        let cal = entries
            .next()
            .filter(|c| c.name == layer.spec.name)
            .ok_or_else(|| Error::InvalidArgument(format!("calibration report has no entry for `{}`", layer.spec.name)))?;
        let formats = cal.formats().expect("complete report");
        let params = layer
            .params
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("conv layer `{}` without parameters", layer.spec.name)))?;
        layer.params = Some(ConvParams::Fixed(params.fixed(&formats).into_owned()));
        layer.spec.formats = Some(formats);
    }
    out.mode = Mode::Fixed;
    out.input_format = report.image_format;
    out.validate()?;
    Ok(out)
}

/// Detections of `model` on every image, keyed by image id. Images run in
/// parallel.
pub fn detect_all<T: Scalar>(
    model: &Model<T>,
    images: &[(String, Tensor<T>)],
    params: &DetectParams,
) -> Result<BTreeMap<String, Vec<Detection<f64>>>> {
    images
        .par_iter()
        .map(|(id, img)| Ok((id.clone(), run_detector(model, img, model.mode, params)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationDelta {
    pub float: EvalReport,
    pub quantized: EvalReport,
}

impl QuantizationDelta {
    /// `LAMR(quantized) - LAMR(float)` in percentage points.
    pub fn delta(&self) -> f64 {
        self.quantized.lamr - self.float.lamr
    }
}

/// Runs detection and evaluation with both models on the same data.
pub fn compare_models<T: Scalar>(
    float_model: &Model<T>,
    quant_model: &Model<T>,
    images: &[(String, Tensor<T>)],
    annotations: &[GroundTruthBox],
    params: &DetectParams,
    cfg: &EvalConfig,
) -> Result<QuantizationDelta> {
    if annotations.is_empty() {
        return Err(Error::Empty("annotations".into()));
    }
    let float = evaluate(&detect_all(float_model, images, params)?, annotations, cfg)?;
    let quantized = evaluate(&detect_all(quant_model, images, params)?, annotations, cfg)?;
    Ok(QuantizationDelta { float, quantized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::quantize_value;
    use crate::nn::{forward, ConvSpec, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity() -> Model<f64> {
        Model::new([1, 1, 4, 4]).push(
            Layer::conv("id", ConvSpec::new(1, 1, 1, 1, 0), Tensor::filled([1, 1, 1, 1], 1.0), vec![0.0]).unwrap(),
        )
    }

    fn toy(rng: &mut ChaCha8Rng) -> Model<f64> {
        let s1 = ConvSpec::new(3, 2, 3, 1, 1);
        let s2 = ConvSpec::new(2, 3, 3, 1, 0);
        let w1 = Tensor::from_fn(s1.weight_shape(), |_, _, _, _| rng.gen_range(-0.5..0.5));
        let w2 = Tensor::from_fn(s2.weight_shape(), |_, _, _, _| rng.gen_range(-0.5..0.5));
        Model::new([1, 2, 6, 6])
            .push(Layer::conv("c1", s1, w1, vec![0.1, -0.2, 0.0]).unwrap())
            .push(Layer::relu("r1"))
            .push(Layer::maxpool("p1", 2, 2))
            .push(Layer::conv("c2", s2, w2, vec![0.3, 0.0]).unwrap())
    }

    fn images(rng: &mut ChaCha8Rng, shape: [usize; 4], n: usize) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|_| Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn identity_feature_range_is_image_range() {
        let img = Tensor::new([1, 1, 4, 4], (0..16).map(|v| v as f64 / 4.0 - 1.0).collect()).unwrap();
        let r = extract_dynamic_range(&identity(), std::slice::from_ref(&img)).unwrap();
        assert_eq!(r.samples, 1);
        assert_eq!(r.layers[0].feature_range, DynamicRange::of(img.data()).unwrap());
        assert_eq!(r.image_range, r.layers[0].feature_range);
    }

    #[test]
    fn parameter_range_is_direct_max() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0);
        let m = Model::new([1, 1, 1, 2])
            .push(Layer::conv("c", ConvSpec { kernel: 1, ..spec }, Tensor::filled([1, 1, 1, 1], -3.0), vec![2.0]).unwrap());
        let r = extract_dynamic_range(&m, &[Tensor::zeros([1, 1, 1, 2])]).unwrap();
        assert_eq!(r.layers[0].parameter_range().max_abs, 3.0);
        assert!(extract_dynamic_range(&m, &[]).is_err());
    }

    #[test]
    fn ranges_match_independent_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = toy(&mut rng);
        let imgs = images(&mut rng, [1, 2, 6, 6], 10);
        let report = extract_dynamic_range(&m, &imgs).unwrap();
        let mut post_pool: f64 = 0.0;
        let mut last: f64 = 0.0;
        for img in &imgs {
            let mut outs = Vec::new();
            forward_visit(&m, img, Mode::Real, |_, _, a| outs.push(a.to_real())).unwrap();
            post_pool = outs[2].data().iter().fold(post_pool, |a, v| a.max(v.abs()));
            last = outs[3].data().iter().fold(last, |a, v| a.max(v.abs()));
        }
        assert_eq!(report.layers[0].feature_range.max_abs, post_pool);
        assert_eq!(report.layers[1].feature_range.max_abs, last);
        assert_eq!(report.layers[1].input_range.max_abs, post_pool);

        let mut shuffled = imgs.clone();
        shuffled.reverse();
        assert_eq!(extract_dynamic_range(&m, &shuffled).unwrap(), report);
        shuffled.push(images(&mut rng, [1, 2, 6, 6], 1).remove(0));
        let grown = extract_dynamic_range(&m, &shuffled).unwrap();
        for (a, b) in report.layers.iter().zip(&grown.layers) {
            assert!(b.feature_range.max_abs >= a.feature_range.max_abs);
        }
    }

    #[test]
    fn allocation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = toy(&mut rng);
        let mut report = extract_dynamic_range(&m, &images(&mut rng, [1, 2, 6, 6], 3)).unwrap();
        report.image_range = DynamicRange::new(0.0, 1.0).unwrap();
        for l in &mut report.layers {
            l.weight_range = DynamicRange::new(0.0, 0.9).unwrap();
            l.feature_range = DynamicRange::new(0.0, 1.0).unwrap();
        }
        report.layers[1].feature_range = DynamicRange::new(0.0, 5.3).unwrap();
        let full = allocate_qformats(&m, &report, 16).unwrap();
        assert!(full.is_complete());
        assert_eq!(full.layers[0].weight_format.unwrap().frac_bits(), 15);
        assert_eq!(full.layers[0].activation_format.unwrap().frac_bits(), 14);
        assert_eq!(full.layers[1].activation_format.unwrap().frac_bits(), 12);
        // second conv reads what the first one stored
        assert_eq!(full.layers[1].input_format, full.layers[0].activation_format);

        let narrow = allocate_qformats(&m, &report, 8).unwrap();
        assert!(narrow.layers.iter().all(|l| l.formats().unwrap().weight.width() == 8));
        report.layers[0].feature_range.max_abs = 1e6;
        let err = allocate_qformats(&m, &report, 8).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn quantized_identity_tracks_real() {
        let m = identity();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs: Vec<_> = (0..4)
            .map(|_| Tensor::from_fn([1, 1, 4, 4], |_, _, _, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let report = allocate_qformats(&m, &extract_dynamic_range(&m, &imgs).unwrap(), 16).unwrap();
        let q = quantize_model(&m, &report).unwrap();
        assert_eq!(q.mode, Mode::Fixed);
        assert_eq!(q.layers.len(), m.layers.len());
        assert_eq!(q.layer_shapes().unwrap(), m.layer_shapes().unwrap());
        for img in &imgs {
            let a = forward(&m, img, Mode::Real).unwrap().output.to_real();
            let b = forward(&q, img, Mode::Fixed).unwrap().output.to_real();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 2f64.powi(-12));
            }
        }
        assert_eq!(quantize_model(&q, &report).unwrap(), q);
    }

    #[test]
    fn weights_within_round_trip_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = toy(&mut rng);
        let report = allocate_qformats(&m, &extract_dynamic_range(&m, &images(&mut rng, [1, 2, 6, 6], 2)).unwrap(), 16)
            .unwrap();
        let q = quantize_model(&m, &report).unwrap();
        for (orig, conv) in m.layers.iter().zip(&q.layers) {
            let (Some(ConvParams::Real { weights, .. }), Some(ConvParams::Fixed(p))) = (&orig.params, &conv.params) else {
                continue;
            };
            let fmt = p.weights.format();
            for (&w, &raw) in weights.data().iter().zip(p.weights.raw().data()) {
                assert_eq!(raw, quantize_value(w, fmt));
                assert!((w - crate::fxp::dequantize_value(raw, fmt)).abs() <= fmt.step() / 2.0);
            }
        }
    }

    #[test]
    fn report_round_trips_as_text() {
        let m = identity();
        let report = allocate_qformats(&m, &extract_dynamic_range(&m, &[Tensor::filled([1, 1, 4, 4], 0.5)]).unwrap(), 16)
            .unwrap();
        let text = report.to_toml().unwrap();
        assert!(text.contains("feature_range"));
        assert_eq!(CalibrationReport::from_toml(&text).unwrap(), report);
    }
}
