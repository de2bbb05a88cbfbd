//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CRFT"
//! 4       4     u32 format version
//! 8       8     u64 config hash
//! 16      20    u32 x 5: data_dim, time_dim, cond_dim, hidden[0], hidden[1]
//! 36      8     u64 training step
//! 44      8     u64 parameter count n
//! 52      8n    f64 parameters (W1, b1, W2, b2, W3, b3; weights row-major)
//! 52+8n   1     u8 optimizer flag (0 or 1)
//! if flag = 1:
//!         8     u64 optimizer step
//!         8n    f64 first moments
//!         8n    f64 second moments
//! ```

use std::path::Path;

use crate::diffusion::{Architecture, ModelParams};
use crate::error::{CraftError, Result};
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 4] = b"CRFT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub params: ModelParams<f64>,
    pub optimizer: Option<OptimizerState<f64>>,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CraftError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CraftError::Format("parameter count overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.params.architecture();
        let values = self.params.values();
        let mut out = Vec::with_capacity(64 + 24 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        for d in [arch.data_dim, arch.time_dim, arch.cond_dim, arch.hidden[0], arch.hidden[1]] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        put_f64s(&mut out, values);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                put_f64s(&mut out, &o.m);
                put_f64s(&mut out, &o.v);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CraftError::Format("not a craft checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION {
            return Err(CraftError::Format(format!(
                "checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash = r.u64()?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = Architecture {
            data_dim: dims[0],
            time_dim: dims[1],
            cond_dim: dims[2],
            hidden: [dims[3], dims[4]],
        };
        arch.validate()?;
        let step = r.u64()?;
        let n = r.u64()? as usize;
        if n != arch.param_count() {
            return Err(CraftError::Format(format!(
                "checkpoint holds {n} parameters but its architecture needs {}",
                arch.param_count()
            )));
        }
        let params = ModelParams::from_values(arch, r.f64s(n)?)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                Some(OptimizerState { m, v, step })
            }
            f => return Err(CraftError::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(CraftError::Format(format!("{} trailing bytes in checkpoint", buf.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            step,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
