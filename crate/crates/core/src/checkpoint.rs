//! Binary checkpoint archive.
//!
//! All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "REIDCKPT"
//! version    u32      1
//! step       u64      optimizer steps taken
//! config     u64 length + UTF-8 key=value text
//! count      u32      number of arrays
//! array*     u32 name length + UTF-8 name
//!            u8 kind (0 weight, 1 bias, 2 norm, 3 embedding, 4 buffer)
//!            u8 trainable (0/1)
//!            u32 ndim, then ndim × u64 dims
//!            f32 data, row-major
//! ```
//!
//! Momentum buffers are stored as extra arrays named
//! `optim.velocity/<parameter name>` with kind 4.

use std::path::Path;

use crate::encoder::{ParamKind, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"REIDCKPT";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "optim.velocity/";

/// Momentum buffers aligned with the parameter store; `None` for
/// parameters the optimizer never touches.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Option<Tensor<f32>>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore<f32>) -> Self {
        Self {
            velocity: params
                .params()
                .iter()
                .map(|p| p.trainable.then(|| Tensor::zeros(p.value.rows, p.value.cols)))
                .collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: ParameterStore<f32>,
    pub optimizer: OptimizerState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, kind: ParamKind, trainable: bool, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(kind.code());
    out.push(trainable as u8);
    put_u32(out, 2);
    put_u64(out, t.rows as u64);
    put_u64(out, t.cols as u64);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.optimizer.step);
        put_u64(&mut out, self.config_text.len() as u64);
        out.extend_from_slice(self.config_text.as_bytes());
        let ps = self.params.params();
        let n_vel = self.optimizer.velocity.iter().flatten().count();
        put_u32(&mut out, (ps.len() + n_vel) as u32);
        for p in ps {
            put_array(&mut out, &p.name, p.kind, p.trainable, &p.value);
        }
        for (p, v) in ps.iter().zip(&self.optimizer.velocity) {
            if let Some(v) = v {
                put_array(
                    &mut out,
                    &format!("{VELOCITY_PREFIX}{}", p.name),
                    ParamKind::Buffer,
                    false,
                    v,
                );
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let clen = r.u64()? as usize;
        let config_text =
            String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut params = ParameterStore::new();
        let mut velocities = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let kind =
                ParamKind::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown kind")))?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(Error::Checkpoint(format!("{name}: bad trainable flag"))),
            };
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}"))),
            };
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(rows, cols, data);
            if let Some(target) = name.strip_prefix(VELOCITY_PREFIX) {
                velocities.push((target.to_string(), t));
            } else {
                if params.id(&name).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate array {name}")));
                }
                params.insert(name, kind, trainable, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let mut velocity: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
        for (name, t) in velocities {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("velocity for unknown parameter {name}")))?;
            if t.shape() != params.value(id).shape() {
                return Err(Error::Checkpoint(format!("velocity shape mismatch for {name}")));
            }
            velocity[id] = Some(t);
        }
        Ok(Self {
            config_text,
            params,
            optimizer: OptimizerState { velocity, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_parameters, EncoderConfig};

    #[test]
    fn round_trip() {
        let params = init_parameters::<f32>(&EncoderConfig::toy(), 1).unwrap();
        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = 17;
        if let Some(v) = optimizer.velocity[3].as_mut() {
            v.data[0] = 0.25;
        }
        let c = Checkpoint {
            config_text: "seed=1\n".into(),
            params,
            optimizer,
        };
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let params = init_parameters::<f32>(&EncoderConfig::toy(), 1).unwrap();
        let c = Checkpoint {
            config_text: String::new(),
            optimizer: OptimizerState::new(&params),
            params,
        };
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
