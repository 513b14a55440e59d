//! Binary tensor snapshots: `"FDN1"`, `u8` dtype tag, `u32` rank, `rank`
//! `u32` dims, then the little-endian payload. All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, DType, Real, Tensor};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"FDN1";

pub fn write_snapshot_to<T: Real>(tensor: &Tensor<T>, out: &mut impl Write) -> Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&[T::DTYPE.tag()])?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&tensor.to_le_bytes())?;
    Ok(())
}

pub fn read_snapshot_from<T: Real>(input: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::format("snapshot", format!("bad magic {magic:?}")));
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])
        .ok_or_else(|| Error::format("snapshot", format!("unknown dtype tag {}", tag[0])))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            "snapshot",
            format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE),
        ));
    }
    let rank = read_u32(input)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::format(
            "snapshot",
            format!("unsupported rank {rank}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(input)? as usize);
    }
    let mut payload = vec![0u8; numel(&shape) * dtype.size()];
    input.read_exact(&mut payload)?;
    let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_snapshot<T: Real>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_snapshot_to(tensor, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_snapshot<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    read_snapshot_from(&mut bytes.as_slice())
}
