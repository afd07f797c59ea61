//! NCTD v1 tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                              |
//! |--------------|------------------------------------|
//! | 4            | magic `NCTD`                       |
//! | 4            | u32 version = 1                    |
//! | 1            | u8 dtype code (1 = f32, 2 = f64)   |
//! | 1            | u8 rank                            |
//! | 8 × rank     | u64 extents                        |
//! | numel × size | row-major little-endian payload    |

use std::io::{Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NCTD";
pub const VERSION: u32 = 1;

/// A tensor whose element type is only known at runtime.
#[derive(Clone, Debug)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn into_dtype<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => encode(t),
            AnyTensor::F64(t) => encode(t),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 10 {
        return Err(Error::format(
            "header",
            format!("expected at least 10 bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected `NCTD`, found {:?}", &bytes[..4]),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("expected {VERSION}, found {version}"),
        ));
    }
    let dtype = DType::from_code(bytes[8])
        .ok_or_else(|| Error::format("dtype", format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::format(
            "extents",
            format!("expected {header} header bytes, found {}", bytes.len()),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 10 + 8 * i;
        let e = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        shape.push(
            usize::try_from(e)
                .map_err(|_| Error::format("extents", format!("extent {e} too large")))?,
        );
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format("extents", "element count overflows"))?;
    let expected = numel
        .checked_mul(dtype.size_of())
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::format("extents", "payload size overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes in total, found {}", bytes.len()),
        ));
    }
    let payload = &bytes[header..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&shape, payload)),
        DType::F64 => AnyTensor::F64(decode_payload(&shape, payload)),
    })
}

fn decode_payload<T: Element>(shape: &[usize], payload: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size_of();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
