//! `FXT1` tensor blobs.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `FXT1`                            |
//! | 4      | 1    | dtype code (see [`DType`])              |
//! | 5      | 1    | q-format width (0 for real payloads)    |
//! | 6      | 1    | q-format fractional bits                |
//! | 7      | 1    | reserved, zero                          |
//! | 8      | 16   | dims n, c, h, w as `u32`                |
//! | 24     | 8    | reserved, zero                          |
//! | 32     | ..   | `n*c*h*w` raw elements                  |
//!
//! Integer payloads hold two's-complement raw values. Accumulator-scale
//! biases use `I64` with width 64.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fxp::QFormat;
use crate::scalar::Scalar;
use crate::tensor::{FixedTensor, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FXT1";
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    I8 = 3,
    I16 = 4,
    I32 = 5,
    I64 = 6,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => DType::F32,
            2 => DType::F64,
            3 => DType::I8,
            4 => DType::I16,
            5 => DType::I32,
            6 => DType::I64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I16 => 2,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn is_real(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    /// Narrowest integer type holding raw values of the given bit width.
    pub fn for_width(width: u32) -> Self {
        match width {
            0..=8 => DType::I8,
            9..=16 => DType::I16,
            17..=32 => DType::I32,
            _ => DType::I64,
        }
    }
}

/// Element types that can be stored natively in a blob.
pub trait BlobElement: Copy {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
}

impl BlobElement for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl BlobElement for f64 {
    const DTYPE: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobHeader {
    pub dtype: DType,
    pub width: u8,
    pub frac_bits: u8,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(Vec<f64>),
    Int(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub header: BlobHeader,
    pub payload: Payload,
}

fn header_bytes(h: &BlobHeader) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[h.dtype as u8, h.width, h.frac_bits, 0]);
    for d in h.shape.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 8]);
    Ok(out)
}

pub fn encode_real<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let header = BlobHeader {
        dtype: T::DTYPE,
        width: 0,
        frac_bits: 0,
        shape: t.shape(),
    };
    let mut out = header_bytes(&header)?;
    out.reserve(t.data().len() * T::DTYPE.size());
    for &v in t.data() {
        v.put(&mut out);
    }
    Ok(out)
}

fn encode_ints(header: BlobHeader, values: impl Iterator<Item = i64>) -> Result<Vec<u8>> {
    let mut out = header_bytes(&header)?;
    for v in values {
        match header.dtype {
            DType::I8 => out.extend_from_slice(&(v as i8).to_le_bytes()),
            DType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            DType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            DType::I64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F32 | DType::F64 => unreachable!("integer encoder"),
        }
    }
    Ok(out)
}

pub fn encode_fixed(t: &FixedTensor) -> Result<Vec<u8>> {
    let q = t.format();
    let header = BlobHeader {
        dtype: DType::for_width(q.width()),
        width: q.width() as u8,
        frac_bits: q.frac_bits() as u8,
        shape: t.shape(),
    };
    encode_ints(header, t.raw().data().iter().map(|&v| v as i64))
}

/// Accumulator-scale values (biases) as a `1 x len x 1 x 1` `I64` blob.
pub fn encode_wide(values: &[i64], frac_bits: u32) -> Result<Vec<u8>> {
    let header = BlobHeader {
        dtype: DType::I64,
        width: 64,
        frac_bits: frac_bits as u8,
        shape: Shape::new(1, values.len(), 1, 1),
    };
    encode_ints(header, values.iter().copied())
}

pub fn decode(bytes: &[u8], name: &str) -> Result<Blob> {
    let err = |detail: String| Error::Blob {
        path: name.to_string(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err("bad magic, expected FXT1".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| err(format!("unknown dtype code {}", bytes[4])))?;
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let header = BlobHeader {
        dtype,
        width: bytes[5],
        frac_bits: bytes[6],
        shape,
    };
    let body = &bytes[HEADER_LEN..];
    let expected = shape
        .n
        .checked_mul(shape.c)
        .and_then(|v| v.checked_mul(shape.h))
        .and_then(|v| v.checked_mul(shape.w))
        .and_then(|v| v.checked_mul(dtype.size()))
        .ok_or_else(|| err("dimension overflow".into()))?;
    if body.len() != expected {
        return Err(err(format!(
            "payload is {} bytes, shape {shape} of {dtype:?} needs {expected}",
            body.len()
        )));
    }
    let chunks = body.chunks_exact(dtype.size());
    let payload = match dtype {
        DType::F32 => Payload::Real(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()),
        DType::F64 => Payload::Real(chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::I8 => Payload::Int(chunks.map(|c| c[0] as i8 as i64).collect()),
        DType::I16 => Payload::Int(chunks.map(|c| i16::from_le_bytes(c.try_into().unwrap()) as i64).collect()),
        DType::I32 => Payload::Int(chunks.map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64).collect()),
        DType::I64 => Payload::Int(chunks.map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(Blob { header, payload })
}

impl Blob {
    fn err(name: &str, detail: impl Into<String>) -> Error {
        Error::Blob {
            path: name.to_string(),
            detail: detail.into(),
        }
    }

    pub fn into_real<T: Scalar>(self, name: &str) -> Result<Tensor<T>> {
        match self.payload {
            Payload::Real(v) => Tensor::new(self.header.shape, v.into_iter().map(T::of).collect()),
            Payload::Int(_) => Err(Self::err(name, "expected a real payload, found fixed-point")),
        }
    }

    pub fn into_fixed(self, name: &str) -> Result<FixedTensor> {
        let q = QFormat::new(self.header.width as u32, self.header.frac_bits as u32)?;
        match self.payload {
            Payload::Int(v) => {
                let raw: Vec<i32> = v
                    .into_iter()
                    .map(|x| {
                        if q.contains_raw(x) {
                            Ok(x as i32)
                        } else {
                            Err(Self::err(name, format!("raw value {x} outside {q}")))
                        }
                    })
                    .collect::<Result<_>>()?;
                FixedTensor::new(Tensor::new(self.header.shape, raw)?, q)
            }
            Payload::Real(_) => Err(Self::err(name, "expected a fixed-point payload, found real")),
        }
    }

    /// Accumulator-scale integers and their fractional bit count.
    pub fn into_wide(self, name: &str) -> Result<(Vec<i64>, u32)> {
        match self.payload {
            Payload::Int(v) if self.header.dtype == DType::I64 => Ok((v, self.header.frac_bits as u32)),
            _ => Err(Self::err(name, "expected an I64 accumulator-scale payload")),
        }
    }
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let bytes = super::read_file(path)?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::quantize_tensor;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new([1, 2, 1, 1], vec![1.0f32, -2.0]).unwrap();
        let b = encode_real(&t).unwrap();
        assert_eq!(b.len(), 32 + 8);
        assert_eq!(&b[0..4], b"FXT1");
        assert_eq!(b[4], 1);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[32..36], &1.0f32.to_le_bytes());
    }

    #[test]
    fn real_and_fixed_round_trip() {
        let t = Tensor::new([1, 1, 2, 2], vec![0.25f64, -1.5, 3.0, 1e-3]).unwrap();
        let back: Tensor<f64> = decode(&encode_real(&t).unwrap(), "t").unwrap().into_real("t").unwrap();
        assert_eq!(back, t);

        let q = QFormat::new(16, 10).unwrap();
        let f = quantize_tensor(&t, q);
        let bytes = encode_fixed(&f).unwrap();
        assert_eq!(bytes[4], DType::I16 as u8);
        assert_eq!((bytes[5], bytes[6]), (16, 10));
        assert_eq!(decode(&bytes, "f").unwrap().into_fixed("f").unwrap(), f);

        let (wide, frac) = decode(&encode_wide(&[1 << 40, -7], 28).unwrap(), "b")
            .unwrap()
            .into_wide("b")
            .unwrap();
        assert_eq!((wide, frac), (vec![1 << 40, -7], 28));
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::new([1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        let mut b = encode_real(&t).unwrap();
        assert!(decode(&b[..20], "x").is_err());
        assert!(decode(&b[..b.len() - 1], "x").unwrap_err().to_string().contains("payload"));
        b[0] = b'G';
        assert!(decode(&b, "x").is_err());
        b[0] = b'F';
        b[4] = 99;
        assert!(decode(&b, "x").is_err());
    }
}
