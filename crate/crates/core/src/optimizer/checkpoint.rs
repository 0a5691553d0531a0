//! Binary optimiser-state checkpoints.
//!
//! Layout (little endian): `b"GSED"`, `u32` version, `u32` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64` dims
//! and `f64` data.

use std::path::Path;

use super::adam::Moments;
use super::OptimState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSED";
pub const VERSION: u32 = 1;

/// Ids are stored as `f64`, exact up to this bound.
const MAX_EXACT_ID: u64 = 1 << 53;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, dims: Vec<u64>, data: Vec<f64>) -> Self {
        Tensor {
            name: name.to_string(),
            dims,
            data,
        }
    }
}

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let n: u64 = t.dims.iter().product();
        if n as usize != t.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has dims {:?} but {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::InvalidInput("checkpoint is truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::InvalidInput("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::InvalidInput(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::InvalidInput("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let n = dims
            .iter()
            .try_fold(1u64, |a, d| a.checked_mul(*d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::InvalidInput(format!("tensor {name} is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::InvalidInput("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(Tensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidInput("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn state_to_tensors(state: &OptimState) -> Result<Vec<Tensor>> {
    if let Some(id) = state.ids.iter().find(|id| **id >= MAX_EXACT_ID) {
        return Err(Error::InvalidInput(format!("gaussian id {id} too large for a checkpoint")));
    }
    let n = state.ids.len() as u64;
    let per = super::PARAMS_PER_GAUSSIAN as u64;
    let f = state.field.len() as u64;
    Ok(vec![
        Tensor::new("step", vec![1], vec![state.step as f64]),
        Tensor::new("gaussian.ids", vec![n], state.ids.iter().map(|v| *v as f64).collect()),
        Tensor::new("gaussian.m", vec![n, per], state.gaussians.m.clone()),
        Tensor::new("gaussian.v", vec![n, per], state.gaussians.v.clone()),
        Tensor::new("field.m", vec![f], state.field.m.clone()),
        Tensor::new("field.v", vec![f], state.field.v.clone()),
    ])
}

pub fn state_from_tensors(tensors: &[Tensor]) -> Result<OptimState> {
    let get = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks tensor {name}")))
    };
    let step = get("step")?.data.first().copied().unwrap_or(0.0);
    let ids: Vec<u64> = get("gaussian.ids")?.data.iter().map(|v| *v as u64).collect();
    let gm = get("gaussian.m")?.data.clone();
    let gv = get("gaussian.v")?.data.clone();
    let fm = get("field.m")?.data.clone();
    let fv = get("field.v")?.data.clone();
    let expect = ids.len() * super::PARAMS_PER_GAUSSIAN;
    if gm.len() != expect || gv.len() != expect || fm.len() != fv.len() {
        return Err(Error::ShapeMismatch("checkpoint tensors disagree in size".into()));
    }
    Ok(OptimState {
        step: step as u64,
        ids,
        gaussians: Moments { m: gm, v: gv },
        field: Moments { m: fm, v: fv },
    })
}

pub fn save_state(path: &Path, state: &OptimState) -> Result<()> {
    crate::io::write_bytes(path, &encode_tensors(&state_to_tensors(state)?)?)
}

pub fn load_state(path: &Path) -> Result<OptimState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from_tensors(&decode_tensors(&bytes)?)
}
