//! `HCWT` binary tensor container.
//!
//! Layout (little-endian): magic `HCWT`, `u32` version, `u8` dtype, `u8` ndim,
//! `ndim × u32` dims, then the row-major payload. Dtype 1 is `f32`, 2 is `u32`
//! and 3 is `f64` (used for checkpoints so parameters survive bit-exactly).

use std::path::Path;

use crate::error::{HcwError, Result};

pub const MAGIC: &[u8; 4] = b"HCWT";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 4 + 4 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U32 = 2,
    F64 = 3,
}

impl DType {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::F32),
            2 => Some(Self::U32),
            3 => Some(Self::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 | Self::U32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::U32(_) => DType::U32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A tensor as stored on disk. `dims` may be empty (a scalar with one element).
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(HcwError::validation(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(HcwError::validation(format!(
                "dims {dims:?} do not fit the container header"
            )));
        }
        let finite = match &data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::U32(_) => true,
        };
        if !finite {
            return Err(HcwError::numeric("refusing to store non-finite values"));
        }
        Ok(Self { dims, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_f64(self) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            TensorData::F64(v) => Ok((self.dims, v)),
            TensorData::F32(v) => Ok((self.dims, v.into_iter().map(f64::from).collect())),
            TensorData::U32(_) => Err(HcwError::validation("expected a floating-point tensor")),
        }
    }

    pub fn into_u32(self) -> Result<(Vec<usize>, Vec<u32>)> {
        match self.data {
            TensorData::U32(v) => Ok((self.dims, v)),
            _ => Err(HcwError::validation("expected an unsigned-integer tensor")),
        }
    }
}

pub fn encode(t: &StoredTensor) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(HEADER_FIXED + 4 * t.dims.len() + t.data.dtype().width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.data.dtype() as u8);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Parses a container; `origin` only labels error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<StoredTensor> {
    let fail = |msg: String| HcwError::format(origin, msg);
    if bytes.len() < HEADER_FIXED {
        return Err(fail(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dtype =
        DType::from_byte(bytes[8]).ok_or_else(|| fail(format!("unknown dtype {}", bytes[8])))?;
    let ndim = bytes[9] as usize;
    let dims_end = HEADER_FIXED + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(fail(format!("truncated header: {ndim} dims declared")));
    }
    let dims: Vec<usize> = bytes[HEADER_FIXED..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[dims_end..];
    let expected = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| fail(format!("dims {dims:?} overflow")))?;
    if payload.len() != expected {
        return Err(fail(format!(
            "payload is {} bytes, dims {dims:?} require {expected}",
            payload.len()
        )));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::U32 => TensorData::U32(
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    Ok(StoredTensor { dims, data })
}

pub fn write_tensor(path: &Path, t: &StoredTensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| HcwError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = std::fs::read(path).map_err(|e| HcwError::io(path, e))?;
    decode(&bytes, path)
}
