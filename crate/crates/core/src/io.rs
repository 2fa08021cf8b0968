//! The `DTNSR1` binary tensor format.
//!
//! Layout: the six magic bytes `DTNSR1`, one dtype byte (0 = f32, 1 = f64),
//! one rank byte, `rank` little-endian `u32` dimensions, then the elements
//! in row-major order, little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DTNSR1";

/// A tensor whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
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

    /// Converts to the requested element type.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing DTNSR1 magic".into()));
    }
    let dtype = DType::from_code(bytes[6])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[6])))?;
    let rank = bytes[7] as usize;
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated dimension block".into()));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != numel * dtype.size_of() {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            numel * dtype.size_of(),
            payload.len()
        )));
    }
    fn elements<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
        let data = payload
            .chunks_exact(T::DTYPE.size_of())
            .map(T::read_le)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(elements(shape, payload)?),
        DType::F64 => AnyTensor::F64(elements(shape, payload)?),
    })
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
