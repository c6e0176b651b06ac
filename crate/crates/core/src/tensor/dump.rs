//! Golden-test tensor dump format.
//!
//! Little-endian: magic `TNSR`, `u32` rank, `u32` dims, then `f64` values in
//! row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let bad = |msg: &str| Error::format("<tensor dump>", msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u).map_err(|_| bad("missing rank"))?;
    let rank = u32::from_le_bytes(u) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u).map_err(|_| bad("truncated dims"))?;
        shape.push(u32::from_le_bytes(u) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut f = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut f).map_err(|_| bad("truncated data"))?;
        data.push(f64::from_le_bytes(f));
    }
    Tensor::new(shape, data)
}
