use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MSPT";

/// Appends `t` as `MSPT | dtype u8 | rank u8 | u32 extents | raw LE values`.
pub fn write_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Parses one tensor from the front of `bytes`, returning it together with the
/// number of bytes consumed.
pub fn read_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let short = || Error::Format("truncated tensor".into());
    if bytes.len() < 6 {
        return Err(short());
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let dtype = DType::from_code(bytes[4])?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("tensor dtype {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(pos..pos + 4).ok_or_else(short)?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let end = pos + n * T::BYTES;
    let raw = bytes.get(pos..end).ok_or_else(short)?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok((Tensor::new(shape, data)?, end))
}
