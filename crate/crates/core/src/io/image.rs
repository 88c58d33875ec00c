//! Binary PGM / PPM images and tensor-blob images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::blob;

fn err(name: &str, detail: impl Into<String>) -> Error {
    Error::Image {
        path: name.to_string(),
        detail: detail.into(),
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, name: &str) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(err(name, "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, name: &str, what: &str) -> Result<usize> {
    let t = token(bytes, pos, name)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| err(name, format!("bad {what} `{}`", String::from_utf8_lossy(t))))
}

/// Decodes a binary P5 (grey) or P6 (colour) image into a `1xCxHxW` tensor
/// with samples scaled to `[0, 1]`.
pub fn decode_pnm<T: Scalar>(bytes: &[u8], name: &str) -> Result<Tensor<T>> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos, name)? {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(err(name, format!("unsupported magic `{}`", String::from_utf8_lossy(m)))),
    };
    let w = number(bytes, &mut pos, name, "width")?;
    let h = number(bytes, &mut pos, name, "height")?;
    let maxval = number(bytes, &mut pos, name, "maxval")?;
    if maxval > 65535 {
        return Err(err(name, format!("maxval {maxval} above 65535")));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let sample = if maxval > 255 { 2 } else { 1 };
    let need = w * h * channels * sample;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() < need {
        return Err(err(name, format!("truncated payload: {} of {} bytes", data.len(), need)));
    }
    let maxval = maxval as f64;
    let value = |i: usize| -> T {
        let v = if sample == 2 {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f64
        } else {
            data[i] as f64
        };
        T::of((v / maxval).min(1.0))
    };
    // samples are interleaved per pixel; the tensor is planar
    Ok(Tensor::from_fn([1, channels, h, w], |_, c, y, x| value((y * w + x) * channels + c)))
}

/// Encodes a `1x1xHxW` or `1x3xHxW` tensor with values in `[0, 1]` as an
/// 8-bit P5 / P6 image.
pub fn encode_pnm<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(Error::shape("pnm", format!("cannot encode {s} as an image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                let v = t.at(0, c, y, x).as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Loads a PGM, PPM or FXT1 tensor-blob image.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = super::read_file(path)?;
    let name = path.display().to_string();
    if bytes.starts_with(&blob::MAGIC[..]) {
        let t: Tensor<T> = blob::decode(&bytes, &name)?.into_real(&name)?;
        if t.shape().n != 1 {
            return Err(err(&name, format!("blob image must hold one image, found {}", t.shape())));
        }
        return Ok(t);
    }
    decode_pnm(&bytes, &name)
}
