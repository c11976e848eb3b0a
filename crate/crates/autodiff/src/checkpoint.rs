//! Flat little-endian checkpoint format.
//!
//! ```text
//! magic    4 bytes  "DSCK"
//! version  u32
//! count    u32      number of records
//! step     u64      optimizer steps taken
//! record*:
//!   name_len u32, name (UTF-8)
//!   kind     u8     0 = trainable parameter, 1 = buffer
//!   rank     u32, dims u64 × rank
//!   values   f64 × n
//!   adam_m   f64 × n   (trainable only)
//!   adam_v   f64 × n   (trainable only)
//! ```

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::optim::{ParamStore, Parameter};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamStore,
    /// Non-trainable state such as batch-norm running statistics.
    pub buffers: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = ckpt.params.len() + ckpt.buffers.len();
    w.write_all(&(count as u32).to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    for p in ckpt.params.iter() {
        write_header(&mut w, &p.name, KIND_PARAM, p.value.shape())?;
        write_f64s(&mut w, p.value.data())?;
        write_f64s(&mut w, &p.adam_m)?;
        write_f64s(&mut w, &p.adam_v)?;
    }
    for (name, t) in &ckpt.buffers {
        write_header(&mut w, name, KIND_BUFFER, t.shape())?;
        write_f64s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let step = read_u64(&mut r)?;
    let mut params = ParamStore::new();
    let mut buffers = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(AutodiffError::Checkpoint("name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Checkpoint("name is not UTF-8".into()))?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(AutodiffError::Checkpoint(format!("rank {rank} too large")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| AutodiffError::Checkpoint("tensor too large".into()))?;
        let values = Tensor::new(&dims, read_f64s(&mut r, n)?)?;
        match kind[0] {
            KIND_PARAM => {
                let mut p = Parameter::new(name, values);
                p.adam_m = read_f64s(&mut r, n)?;
                p.adam_v = read_f64s(&mut r, n)?;
                let id = params.add(p.name.clone(), p.value.clone());
                *params.get_mut(id) = p;
            }
            KIND_BUFFER => buffers.push((name, values)),
            other => {
                return Err(AutodiffError::Checkpoint(format!(
                    "unknown record kind {other}"
                )))
            }
        }
    }
    Ok(Checkpoint {
        step,
        params,
        buffers,
    })
}

fn write_header<W: Write>(w: &mut W, name: &str, kind: u8, shape: &[usize]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
