//! `VPTF` binary tensor encoding.
//!
//! Layout (little-endian): magic `VPTF`, version `u32 = 1`, dtype code `u8`
//! (0 = f32, 1 = f64), rank `u8`, `rank × u64` extents, row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VPTF";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Header of an encoded tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Offset of the payload from the start of the block.
    pub payload_offset: usize,
}

impl Header {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn block_len(&self) -> usize {
        self.payload_offset + self.numel() * self.dtype.size_of()
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| Error::Format(format!("truncated VPTF block while reading {what}")))
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if take(bytes, 0, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected VPTF".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported VPTF version {version}")));
    }
    let code = take(bytes, 8, 1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let rank = take(bytes, 9, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let raw = u64::from_le_bytes(take(bytes, 10 + 8 * i, 8, "extent")?.try_into().unwrap());
        if raw == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        shape.push(usize::try_from(raw).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    Ok(Header {
        dtype,
        shape,
        payload_offset: 10 + 8 * rank,
    })
}

/// Decode one block, converting to `T` when the stored dtype differs.
/// Returns the tensor and the number of bytes consumed.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let header = read_header(bytes)?;
    let n = header.numel();
    let size = header.dtype.size_of();
    let payload = take(bytes, header.payload_offset, n * size, "payload")?;
    let data: Vec<T> = match header.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    let consumed = header.block_len();
    Ok((Tensor::new(header.shape, data)?, consumed))
}

/// Decode a whole buffer that must contain exactly one block.
pub fn decode_exact<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after VPTF block",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_file<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_exact(&bytes)
}
