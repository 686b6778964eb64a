//! "ABT1" raw tensor container: little-endian, 4-byte magic, 1-byte dtype
//! (0 = u8, 1 = f32), 1-byte rank, u32 dims, then a row-major payload.
//! Used by dataset directories and checkpoints.

use std::io::{Read, Write};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ABT1";

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("bad header: expected magic ABT1, got {0:?}")]
    BadHeader([u8; 4]),
    #[error("bad header: unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated tensor file: {0}")]
    Truncated(String),
    #[error("shape mismatch: expected dtype {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobTensor {
    U8 { dims: Vec<usize>, data: Vec<u8> },
    F32 { dims: Vec<usize>, data: Vec<f32> },
}

impl BlobTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            BlobTensor::U8 { dims, .. } => dims,
            BlobTensor::F32 { dims, .. } => dims,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], BlobError> {
        match self {
            BlobTensor::F32 { data, .. } => Ok(data),
            BlobTensor::U8 { .. } => Err(BlobError::DtypeMismatch { expected: "f32", found: "u8" }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], BlobError> {
        match self {
            BlobTensor::U8 { data, .. } => Ok(data),
            BlobTensor::F32 { .. } => Err(BlobError::DtypeMismatch { expected: "u8", found: "f32" }),
        }
    }
}

pub fn write_blob<W: Write>(w: &mut W, t: &BlobTensor) -> Result<(), BlobError> {
    w.write_all(&MAGIC)?;
    let (code, dims) = match t {
        BlobTensor::U8 { dims, .. } => (0u8, dims),
        BlobTensor::F32 { dims, .. } => (1u8, dims),
    };
    w.write_all(&[code, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match t {
        BlobTensor::U8 { data, .. } => w.write_all(data)?,
        BlobTensor::F32 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_blob<R: Read>(r: &mut R) -> Result<BlobTensor, BlobError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| BlobError::Truncated(format!("while reading magic: {e}")))?;
    if magic != MAGIC {
        return Err(BlobError::BadHeader(magic));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)
        .map_err(|e| BlobError::Truncated(format!("while reading dtype/rank: {e}")))?;
    let (code, rank) = (hdr[0], hdr[1] as usize);
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| BlobError::Truncated(format!("while reading dims: {e}")))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = dims.iter().product();
    match code {
        0 => {
            let mut data = vec![0u8; numel];
            r.read_exact(&mut data)
                .map_err(|e| BlobError::Truncated(format!("while reading u8 payload: {e}")))?;
            Ok(BlobTensor::U8 { dims, data })
        }
        1 => {
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)
                .map_err(|e| BlobError::Truncated(format!("while reading f32 payload: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(BlobTensor::F32 { dims, data })
        }
        other => Err(BlobError::UnknownDtype(other)),
    }
}

/// Serialized byte length of a blob, for offset bookkeeping.
pub fn blob_len(t: &BlobTensor) -> usize {
    let (dims, elem) = match t {
        BlobTensor::U8 { dims, .. } => (dims, 1),
        BlobTensor::F32 { dims, .. } => (dims, 4),
    };
    6 + dims.len() * 4 + dims.iter().product::<usize>() * elem
}
