//! Flat binary tensor format.
//!
//! Layout (all little-endian):
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..4   | magic `MSFT`                            |
//! | 4..8   | version `u32` (currently 1)             |
//! | 8..12  | dtype `u32`: 1 = f32, 2 = f64           |
//! | 12..16 | reserved `u32`, written as 0            |
//! | 16..48 | dims N, C, H, W as `u64`                |
//! | 48..   | payload, N·C·H·W elements of the dtype  |

use std::io::{Read, Write};

use super::{Shape, Tensor};
use crate::error::{MasfError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MSFT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(MasfError::Data(format!("unknown tensor dtype code {other}"))),
        }
    }
}

/// Header plus payload size in bytes for a tensor of `shape`.
pub fn encoded_len(shape: Shape, dtype: DType) -> usize {
    48 + shape.numel() * dtype.size()
}

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    let s = t.shape();
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(dtype as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for d in s.dims() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(s.numel() * dtype.size());
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut header = [0u8; 48];
    input.read_exact(&mut header)?;
    if &header[0..4] != TENSOR_MAGIC {
        return Err(MasfError::Data("bad tensor magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != TENSOR_VERSION {
        return Err(MasfError::Data(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_code(u32_at(8))?;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 16 + 8 * i;
        *d = u64::from_le_bytes(header[o..o + 8].try_into().unwrap()) as usize;
    }
    let shape = Shape::from_dims(dims);
    if !shape.is_valid() {
        return Err(MasfError::Data(format!("invalid tensor dims {shape}")));
    }
    let mut payload = vec![0u8; shape.numel() * dtype.size()];
    input.read_exact(&mut payload)?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(shape, data)
}
