//! Single-file checkpoint archive.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "LRCKPT\0\0"
//! version   u32
//! meta      u64 length + UTF-8 JSON document
//! params    u64 count, then per parameter:
//!             u32 name length + name, u32 rank, rank × u64 dims, f64 × len values
//! adam      u8 flag; when 1:
//!             u64 step, f64 lr, f64 beta1, f64 beta2, f64 epsilon,
//!             u64 count, then per entry: u32 name length + name,
//!             u64 len, f64 × len first moment, f64 × len second moment
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LRCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated archive at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))
    }

    fn floats<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_floats<T: Scalar>(out: &mut Vec<u8>, xs: &[T]) {
    for x in xs {
        out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON value serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_name(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                let c = adam.config;
                for x in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&(adam.first.len() as u64).to_le_bytes());
                for (name, m) in &adam.first {
                    put_name(&mut out, name);
                    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    put_floats(&mut out, m);
                    put_floats(&mut out, &adam.second[name]);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint archive (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.len()?;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut params = ParamStore::new();
        for _ in 0..r.len()? {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
            let data = r.floats(n)?;
            params
                .insert(name.clone(), Tensor::new(shape, data)?)
                .map_err(|_| Error::Checkpoint(format!("duplicate parameter `{name}`")))?;
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let mut first = BTreeMap::new();
                let mut second = BTreeMap::new();
                for _ in 0..r.len()? {
                    let name = r.name()?;
                    if !params.contains(&name) {
                        return Err(Error::Checkpoint(format!(
                            "optimizer state for unknown parameter `{name}`"
                        )));
                    }
                    let n = r.len()?;
                    first.insert(name.clone(), r.floats(n)?);
                    second.insert(name, r.floats(n)?);
                }
                Some(AdamState {
                    config,
                    step,
                    first,
                    second,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
