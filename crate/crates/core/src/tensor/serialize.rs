//! `TNSR` binary blobs.
//!
//! Layout (little-endian): magic `b"TNSR"`, `u32` version, `u8` dtype code,
//! `u8` rank, `rank × u64` extents, then the values in row-major order.

use std::io::Read;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::format("TNSR", format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl BlobData {
    pub fn dtype(&self) -> DType {
        match self {
            BlobData::F32(_) => DType::F32,
            BlobData::F64(_) => DType::F64,
            BlobData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn new(shape: Vec<usize>, data: BlobData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.len() > u8::MAX as usize {
            return Err(Error::format(
                "TNSR",
                format!("shape {shape:?} does not describe {} values", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decodes one blob from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Blob, usize)> {
        let mut cursor = bytes;
        let blob = Self::read_from(&mut cursor)?;
        Ok((blob, bytes.len() - cursor.len()))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Blob> {
        let truncated = |_| Error::format("TNSR", "truncated blob");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format("TNSR", format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(truncated)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Unsupported(format!("TNSR version {version}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head).map_err(truncated)?;
        let dtype = DType::from_code(head[0])?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut ext = [0u8; 8];
            r.read_exact(&mut ext).map_err(truncated)?;
            shape.push(usize::try_from(u64::from_le_bytes(ext)).map_err(|_| Error::format("TNSR", "extent overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("TNSR", "element count overflow"))?;
        let mut raw = vec![0u8; n * dtype.width()];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = match dtype {
            DType::F32 => BlobData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            DType::F64 => BlobData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            DType::U8 => BlobData::U8(raw),
        };
        Ok(Blob { shape, data })
    }
}

impl Tensor {
    /// Encodes as an `f64` TNSR blob.
    pub fn to_tnsr(&self) -> Vec<u8> {
        Blob {
            shape: self.shape.clone(),
            data: BlobData::F64(self.data.clone()),
        }
        .encode()
    }

    /// Decodes a floating point TNSR blob (`f32` is widened).
    pub fn from_tnsr(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let (blob, used) = Blob::decode(bytes)?;
        Ok((Tensor::try_from(blob)?, used))
    }
}

impl TryFrom<Blob> for Tensor {
    type Error = Error;

    fn try_from(blob: Blob) -> Result<Tensor> {
        let data = match blob.data {
            BlobData::F64(v) => v,
            BlobData::F32(v) => v.into_iter().map(f64::from).collect(),
            BlobData::U8(_) => return Err(Error::format("TNSR", "expected floating point data")),
        };
        Tensor::new(blob.shape, data)
    }
}
