//! Model manifests: a TOML description of the layer graph next to one
//! tensor blob per parameter, each referenced with its SHA-256 digest.
//!
//! ```toml
//! format = "fxdetect-model/1"
//! mode = "fixed"
//! input = [1, 1, 128, 128]
//! input_format = { width = 16, frac_bits = 15 }
//!
//! [[layers]]
//! name = "conv1"
//! kind = "conv"
//! out_channels = 1
//! in_channels = 1
//! kernel = 4
//! stride = 4
//! padding = 0
//! weights = { path = "conv1.weights.fxt", sha256 = "..." }
//! bias = { path = "conv1.bias.fxt", sha256 = "..." }
//! formats = { input = { width = 16, frac_bits = 15 }, weight = { ... }, output = { ... } }
//!
//! [head]
//! image_width = 128
//! ...
//! ```
//!
//! Real-mode parameters are stored as float blobs. Fixed-point weights are
//! stored as raw integers in their Q-format and biases as 64-bit integers at
//! the accumulator scale.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fxp::QFormat;
use crate::nn::{ConvFormats, ConvParams, ConvSpec, FixedConvParams, Layer, LayerOp, LayerSpec, Mode, Model};
use crate::scalar::Scalar;
use crate::ssd::PriorConfig;

use super::blob;

pub const FORMAT: &str = "fxdetect-model/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formats: Option<ConvFormats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub format: String,
    pub mode: Mode,
    pub input: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<QFormat>,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<PriorConfig>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File-name-safe version of a layer name.
fn stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn required(entry: &LayerEntry, value: Option<usize>, field: &str) -> Result<usize> {
    value.ok_or_else(|| Error::Manifest(format!("layer `{}` is missing `{field}`", entry.name)))
}

fn entry_for<T: Scalar>(layer: &Layer<T>, blobs: &mut Vec<(String, Vec<u8>)>) -> Result<LayerEntry> {
    let spec = &layer.spec;
    let mut e = LayerEntry {
        name: spec.name.clone(),
        kind: spec.op.kind().to_string(),
        out_channels: None,
        in_channels: None,
        kernel: None,
        stride: None,
        padding: None,
        window: None,
        tap: spec.tap.clone(),
        weights: None,
        bias: None,
        formats: spec.formats,
    };
    match spec.op {
        LayerOp::Conv(c) => {
            e.out_channels = Some(c.out_channels);
            e.in_channels = Some(c.in_channels);
            e.kernel = Some(c.kernel);
            e.stride = Some(c.stride);
            e.padding = Some(c.padding);
            let params = layer
                .params
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("conv layer `{}` without parameters", spec.name)))?;
            let (w, b) = match params {
                ConvParams::Real { weights, bias } => {
                    let bias_t = crate::tensor::Tensor::new([1, bias.len(), 1, 1], bias.clone())?;
                    (blob::encode_real(weights)?, blob::encode_real(&bias_t)?)
                }
                ConvParams::Fixed(p) => (blob::encode_fixed(&p.weights)?, blob::encode_wide(&p.bias, p.bias_frac)?),
            };
            let base = stem(&spec.name);
            for (suffix, bytes, slot) in [("weights", w, &mut e.weights), ("bias", b, &mut e.bias)] {
                let path = format!("{base}.{suffix}.fxt");
                *slot = Some(BlobRef {
                    path: path.clone(),
                    sha256: sha256_hex(&bytes),
                });
                blobs.push((path, bytes));
            }
        }
        LayerOp::MaxPool { window, stride } => {
            e.window = Some(window);
            e.stride = Some(stride);
        }
        LayerOp::Relu | LayerOp::Softmax => {}
    }
    Ok(e)
}

/// Writes the manifest to `path` and each parameter blob next to it. Every
/// file is written atomically.
pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    model.validate()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut blobs = Vec::new();
    let layers = model
        .layers
        .iter()
        .map(|l| entry_for(l, &mut blobs))
        .collect::<Result<Vec<_>>>()?;
    let file = ManifestFile {
        format: FORMAT.to_string(),
        mode: model.mode,
        input: model.input.dims(),
        input_format: model.input_format,
        layers,
        head: model.head.clone(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::Manifest(e.to_string()))?;
    for (name, bytes) in &blobs {
        super::atomic_write(&dir.join(name), bytes)?;
    }
    super::atomic_write(path, text.as_bytes())
}

fn read_checked(dir: &Path, r: &BlobRef) -> Result<blob::Blob> {
    let bytes = super::read_file(&dir.join(&r.path))?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&r.sha256) {
        return Err(Error::Checksum {
            blob: r.path.clone(),
            expected: r.sha256.clone(),
            actual,
        });
    }
    blob::decode(&bytes, &r.path)
}

fn layer_from<T: Scalar>(e: &LayerEntry, dir: &Path) -> Result<Layer<T>> {
    let op = match e.kind.as_str() {
        "conv" => LayerOp::Conv(ConvSpec::new(
            required(e, e.out_channels, "out_channels")?,
            required(e, e.in_channels, "in_channels")?,
            required(e, e.kernel, "kernel")?,
            required(e, e.stride, "stride")?,
            e.padding.unwrap_or(0),
        )),
        "relu" => LayerOp::Relu,
        "maxpool" => LayerOp::MaxPool {
            window: required(e, e.window, "window")?,
            stride: required(e, e.stride, "stride")?,
        },
        "softmax" => LayerOp::Softmax,
        other => return Err(Error::Manifest(format!("layer `{}` has unknown kind `{other}`", e.name))),
    };
    let params = match op {
        LayerOp::Conv(_) => {
            let missing = |what: &str| Error::Manifest(format!("conv layer `{}` has no {what} blob", e.name));
            let wref = e.weights.as_ref().ok_or_else(|| missing("weights"))?;
            let bref = e.bias.as_ref().ok_or_else(|| missing("bias"))?;
            let (w, b) = (read_checked(dir, wref)?, read_checked(dir, bref)?);
            Some(if w.header.dtype.is_real() {
                let bias = b.into_real::<T>(&bref.path)?.into_data();
                ConvParams::Real {
                    weights: w.into_real(&wref.path)?,
                    bias,
                }
            } else {
                let (bias, bias_frac) = b.into_wide(&bref.path)?;
                ConvParams::Fixed(FixedConvParams {
                    weights: w.into_fixed(&wref.path)?,
                    bias,
                    bias_frac,
                })
            })
        }
        _ => {
            if e.weights.is_some() || e.bias.is_some() {
                return Err(Error::Manifest(format!("{} layer `{}` cannot have parameters", e.kind, e.name)));
            }
            None
        }
    };
    Ok(Layer {
        spec: LayerSpec {
            name: e.name.clone(),
            op,
            formats: e.formats,
            tap: e.tap.clone(),
        },
        params,
    })
}

pub fn parse_manifest(text: &str) -> Result<ManifestFile> {
    let file: ManifestFile = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string().trim().to_string()))?;
    if file.format != FORMAT {
        return Err(Error::Manifest(format!("unsupported format `{}`, expected `{FORMAT}`", file.format)));
    }
    Ok(file)
}

/// Loads and fully validates a model: blob checksums, parameter shapes,
/// shape chaining, formats against the mode and head taps.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = parse_manifest(&super::read_text(path)?)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let layers = file
        .layers
        .iter()
        .enumerate()
        .map(|(i, e)| layer_from(e, dir).map_err(|err| err.in_layer(i, &e.name)))
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        input: file.input.into(),
        mode: file.mode,
        input_format: file.input_format,
        layers,
        head: file.head,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvFormats;
    use crate::ssd::TapPriors;
    use crate::tensor::Tensor;

    fn q(w: u32, f: u32) -> QFormat {
        QFormat::new(w, f).unwrap()
    }

    fn model() -> Model<f32> {
        let s1 = ConvSpec::new(2, 1, 3, 1, 1);
        let s2 = ConvSpec::new(6, 2, 1, 1, 0);
        Model::new([1, 1, 4, 4])
            .push(
                Layer::conv("conv1", s1, Tensor::from_fn(s1.weight_shape(), |m, _, i, j| (m + i * j) as f32 * 0.1), vec![0.5, -0.25])
                    .unwrap(),
            )
            .push(Layer::relu("relu1"))
            .push(Layer::maxpool("pool1", 2, 2))
            .push(Layer::conv("head/conv", s2, Tensor::filled(s2.weight_shape(), 0.125), vec![0.0; 6]).unwrap().tapped("head"))
            .with_head(PriorConfig {
                image_width: 4,
                image_height: 4,
                variances: [0.1, 0.2],
                taps: vec![TapPriors {
                    name: "head".into(),
                    grid_h: 2,
                    grid_w: 2,
                    scales: vec![0.5],
                    aspect_ratios: vec![0.41],
                }],
            })
    }

    fn fixed(m: &Model<f32>) -> Model<f32> {
        let mut m = m.clone();
        let f = ConvFormats {
            input: q(16, 12),
            weight: q(16, 14),
            output: q(16, 11),
        };
        for l in &mut m.layers {
            if let Some(p) = &l.params {
                l.params = Some(ConvParams::Fixed(p.fixed(&f).into_owned()));
                l.spec.formats = Some(f);
            }
        }
        m.mode = Mode::Fixed;
        m.input_format = Some(q(16, 12));
        m
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for m in [model(), fixed(&model())] {
            let path = dir.path().join("model.toml");
            save_model(&m, &path).unwrap();
            let back: Model<f32> = load_model(&path).unwrap();
            assert_eq!(back, m);
        }
        assert!(dir.path().join("head_conv.weights.fxt").exists());
    }

    #[test]
    fn corrupted_blob_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        save_model(&model(), &path).unwrap();
        let blob = dir.path().join("conv1.bias.fxt");
        let mut bytes = std::fs::read(&blob).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&blob, bytes).unwrap();
        let err = load_model::<f32>(&path).unwrap_err();
        assert_eq!(err.kind(), "checksum");
        assert!(err.to_string().contains("conv1.bias.fxt"), "{err}");
    }

    #[test]
    fn absent_tap_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        save_model(&model(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("name = \"head\"", "name = \"conv4_3\"");
        std::fs::write(&path, text).unwrap();
        let err = load_model::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("conv4_3"), "{err}");
    }

    #[test]
    fn missing_blob_and_bad_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        save_model(&model(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("kind = \"relu\"", "kind = \"gelu\"")).unwrap();
        let err = load_model::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("gelu"), "{err}");

        std::fs::write(&path, text).unwrap();
        std::fs::remove_file(dir.path().join("conv1.weights.fxt")).unwrap();
        let err = load_model::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("conv1.weights.fxt"), "{err}");
    }

    #[test]
    fn fixed_manifest_without_formats_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        save_model(&fixed(&model()), &path).unwrap();
        let mut file = parse_manifest(&std::fs::read_to_string(&path).unwrap()).unwrap();
        file.input_format = None;
        std::fs::write(&path, toml::to_string(&file).unwrap()).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::MissingFormat(_))));

        let mut file = parse_manifest(&toml::to_string(&file).unwrap()).unwrap();
        file.input_format = Some(q(16, 12));
        file.layers[0].formats = None;
        std::fs::write(&path, toml::to_string(&file).unwrap()).unwrap();
        let err = load_model::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }
}
