//! Little-endian tensor container.
//!
//! Layout: magic `GDT0`, one byte dtype code (0 = f32, 1 = f64), `u32` rank,
//! `rank` × `u64` dimensions, then the raw element buffer.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const TENSOR_MAGIC: &[u8; 4] = b"GDT0";

pub fn write_tensor<S: Scalar>(t: &Tensor<S>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(S::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * S::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("tensor container", format!("truncated at byte {pos}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Reads one container starting at `*pos`, advancing it past the tensor.
/// The stored dtype must match `S`.
pub fn read_tensor<S: Scalar>(bytes: &[u8], pos: &mut usize) -> Result<Tensor<S>> {
    let start = *pos;
    if take(bytes, pos, 4)? != TENSOR_MAGIC {
        return Err(Error::format("tensor container", format!("bad magic at byte {start}")));
    }
    let code = take(bytes, pos, 1)?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format("tensor container", format!("unknown dtype code {code}")))?;
    if dtype != S::DTYPE {
        return Err(Error::format(
            "tensor container",
            format!("stored {dtype:?}, requested {:?}", S::DTYPE),
        ));
    }
    let rank = u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, pos, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::format("tensor container", "dimension overflow"))?);
    }
    let size = dtype.size();
    let raw = take(bytes, pos, numel(&shape) * size)?;
    let data = raw.chunks_exact(size).map(S::read_le).collect();
    Tensor::new(shape, data)
}

/// Reads consecutive containers until the buffer is exhausted.
pub fn read_tensors<S: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<S>>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        out.push(read_tensor(bytes, &mut pos)?);
    }
    Ok(out)
}
