//! `PTNS1` binary tensor format: magic, dtype code, rank, little-endian u32
//! dims, then row-major little-endian scalars.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 5] = b"PTNS1";

pub fn write_tensor_to<T: Scalar, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::TensorFormat(format!("rank {} exceeds 255", t.rank())))?;
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + T::DTYPE.size() * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::TensorFormat(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read one tensor. The stored dtype must match `T`.
pub fn read_tensor_from<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut head = [0u8; 7];
    read_exact(&mut r, &mut head, "header")?;
    if &head[..5] != TENSOR_MAGIC {
        return Err(Error::TensorFormat("bad magic".into()));
    }
    let dtype =
        DType::from_code(head[5]).ok_or_else(|| Error::TensorFormat(format!("unknown dtype code {}", head[5])))?;
    if dtype != T::DTYPE {
        return Err(Error::TensorFormat(format!("stored dtype {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rank = head[6] as usize;
    let mut dims = vec![0u8; 4 * rank];
    read_exact(&mut r, &mut dims, "dims")?;
    let shape: Vec<usize> = dims.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.ok_or_else(|| Error::TensorFormat("element count overflows".into()))?;
    let mut payload = vec![0u8; numel * dtype.size()];
    read_exact(&mut r, &mut payload, "payload")?;
    let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::TensorFormat(e.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TensorFormat(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor_to(&mut buf, t)?;
    crate::util::write_atomic(path.as_ref(), &buf)
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = crate::util::read_file(path.as_ref())?;
    read_tensor_from(bytes.as_slice())
}
