//! Binary tensor dump: magic `CBNT`, version u16, dtype code u8, rank u8,
//! extents as u64, then the little-endian payload.

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"CBNT";
pub const DUMP_VERSION: u16 = 1;

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    encode_body(t, out);
}

/// dtype, rank, extents and payload; shared with the checkpoint tensor table.
pub(crate) fn encode_body<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Reads one tensor dump from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn read_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 6 || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::Format("missing CBNT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let (t, used) = decode_body(&bytes[6..])?;
    Ok((t, used + 6))
}

pub(crate) fn decode_body<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let truncated = || Error::Format("truncated tensor record".into());
    if bytes.len() < 2 {
        return Err(truncated());
    }
    let dtype = DType::from_code(bytes[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[0])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "tensor stored as {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[1] as usize;
    let mut pos = 2;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(truncated)?;
        shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let width = dtype.size();
    let payload = bytes.get(pos..pos + n * width).ok_or_else(truncated)?;
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    pos += n * width;
    Ok((Tensor::new(&shape, data)?, pos))
}
