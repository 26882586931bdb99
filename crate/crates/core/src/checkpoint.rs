//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "FGRCKPT\0"
//! version    u32      1
//! arch       u8       0 = mlp, 1 = tinyconv
//! channels, height, width, classes   u32 each
//! count      u32      number of tensors
//! per tensor, sorted by name:
//!   name_len u32, name (UTF-8)
//!   group    u8       0 = backbone, 1 = head
//!   ndim     u32, then ndim × u64 dims
//!   data     product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, Group, Model, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FGRCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, params: &ModelParams, mut out: impl Write) -> Result<()> {
    model.check_params(params)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match model.arch {
        Arch::Mlp => 0,
        Arch::Tinyconv => 1,
    });
    for dim in [model.channels, model.height, model.width, model.classes] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(match p.group {
            Group::Backbone => 0,
            Group::Head => 1,
        });
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<(Model, ModelParams)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = match c.u8()? {
        0 => Arch::Mlp,
        1 => Arch::Tinyconv,
        other => return Err(Error::Format(format!("unknown arch tag {other}"))),
    };
    let dims: Vec<usize> = (0..4).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let model = Model::new(arch, dims[0], dims[1], dims[2], dims[3])?;
    let count = c.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let group = match c.u8()? {
            0 => Group::Backbone,
            1 => Group::Head,
            other => return Err(Error::Format(format!("unknown group tag {other}"))),
        };
        let ndim = c.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?, group)?;
    }
    if !c.bytes.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    model.check_params(&params)?;
    Ok((model, params))
}

pub fn save(path: impl AsRef<Path>, model: &Model, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, ModelParams)> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        for arch in [Arch::Mlp, Arch::Tinyconv] {
            let model = Model::new(arch, 3, 8, 8, 4).unwrap();
            let params = model.init(3);
            let mut buf = Vec::new();
            write_checkpoint(&model, &params, &mut buf).unwrap();
            assert_eq!(&buf[..8], MAGIC);
            let (m2, p2) = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(m2, model);
            assert_eq!(p2, params);
        }
    }

    #[test]
    fn corrupt_input_errors() {
        let model = Model::new(Arch::Mlp, 3, 8, 8, 2).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &model.init(0), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        buf.push(0);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
