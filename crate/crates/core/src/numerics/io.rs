//! PSWT tensor dump format.
//!
//! ```text
//! magic   b"PSWT"
//! version u16 LE  (currently 1)
//! dtype   u8      0 = f64, 1 = f32
//! rank    u8
//! extents rank × u64 LE
//! data    numel × f64/f32 LE, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PSWT";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: DType) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype.tag(), rank])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<(Tensor, DType)> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = match head[6] {
        0 => DType::F64,
        1 => DType::F32,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let rank = head[7] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)?;
        shape.push(usize::try_from(u64::from_le_bytes(e)).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let numel: usize = shape.iter().product();
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw)?;
    let data = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, dtype))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut bytes = Vec::new();
    write_tensor(&mut bytes, t, dtype)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Ok(read_tensor(bytes.as_slice())?.0)
}
