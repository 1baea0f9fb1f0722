//! Little-endian tensor blobs:
//!
//! ```text
//! "SKTN" | u32 rank | rank × u64 dim | numel × f64
//! ```

use std::io::{Read, Write};

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SKTN";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor blob. `offset` tracks the stream position for error
/// reporting and is advanced past the blob.
pub fn read_tensor<R: Read>(r: &mut R, offset: &mut usize) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, offset)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Parse {
            offset: *offset - 4,
            message: format!("bad tensor magic {magic:?}"),
        });
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, offset)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(Error::Parse {
            offset: *offset - 4,
            message: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8, offset)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = numel_of(&shape);
    let mut payload = vec![0u8; n * 8];
    read_exact(r, &mut payload, offset)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if rank == 0 {
        return Ok(Tensor::build(Vec::new(), std::sync::Arc::new(data), false, None));
    }
    Tensor::new(&shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        offset: *offset,
        message: format!("truncated input: {e}"),
    })?;
    *offset += buf.len();
    Ok(())
}
