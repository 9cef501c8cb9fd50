//! Binary checkpoints.
//!
//! Layout (little-endian): `MPCK`, u16 version, u32 digest length + digest
//! bytes, u64 seed, u64 step, u32 tensor count, then per tensor: u32 name
//! length + name bytes, u32 rank, rank × u32 extents, f64 values.

use std::fs;
use std::path::Path;

use autodiff::Tensor;

use crate::error::{PerserError, Result};
use crate::meta::LslrTable;
use crate::model::{ClassBalanceWeights, ModelParams, TENSOR_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const LSLR_NAME: &str = "lslr";
const WEIGHTS_NAME: &str = "class_weights";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_digest: String,
    pub seed: u64,
    pub step: u64,
    pub params: ModelParams,
    pub lslr: Option<LslrTable>,
    pub class_weights: Option<ClassBalanceWeights>,
}

impl Checkpoint {
    pub fn new(config_digest: impl Into<String>, seed: u64, step: u64, params: ModelParams) -> Self {
        Self {
            config_digest: config_digest.into(),
            seed,
            step,
            params,
            lslr: None,
            class_weights: None,
        }
    }

    fn named_tensors(&self) -> Vec<(&str, Tensor)> {
        let mut out: Vec<(&str, Tensor)> = TENSOR_NAMES.iter().copied().zip(self.params.tensors().iter().cloned()).collect();
        if let Some(l) = &self.lslr {
            out.push((LSLR_NAME, l.to_tensor()));
        }
        if let Some(w) = &self.class_weights {
            out.push((WEIGHTS_NAME, Tensor::vector(w.weights())));
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut buf, self.config_digest.as_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let tensors = self.named_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data().iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(PerserError::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(PerserError::Checkpoint(format!("unsupported version {version}")));
        }
        let digest = String::from_utf8(r.sized()?.to_vec()).map_err(|_| PerserError::Checkpoint("digest is not UTF-8".into()))?;
        let seed = u64::from_le_bytes(r.array()?);
        let step = u64::from_le_bytes(r.array()?);
        let count = r.u32()? as usize;
        let mut head = Vec::new();
        let mut lslr = None;
        let mut weights = None;
        for _ in 0..count {
            let name = String::from_utf8(r.sized()?.to_vec()).map_err(|_| PerserError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| PerserError::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| PerserError::Checkpoint(e.to_string()))?;
            match name.as_str() {
                LSLR_NAME => lslr = Some(LslrTable::from_tensor(&tensor)?),
                WEIGHTS_NAME => weights = Some(ClassBalanceWeights::from_weights(tensor.to_vec())?),
                n if TENSOR_NAMES.get(head.len()) == Some(&n) => head.push(tensor),
                n => return Err(PerserError::Checkpoint(format!("unexpected tensor `{n}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(PerserError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if head.len() != TENSOR_NAMES.len() {
            return Err(PerserError::Checkpoint(format!("expected {} head tensors, found {}", TENSOR_NAMES.len(), head.len())));
        }
        Ok(Self {
            config_digest: digest,
            seed,
            step,
            params: ModelParams::from_tensors(head)?,
            lslr,
            class_weights: weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| PerserError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PerserError::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Equal metadata and bitwise-equal tensors.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.encode() == other.encode()
    }
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PerserError::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn sized(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
