//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "GRNNBF01"
//! record count
//! per record: name length, name (UTF-8), rank, dims[rank], f32 data
//! config length, config bytes (UTF-8)
//! layout length, layout bytes (UTF-8)
//! ```
//!
//! Loading consumes exactly the whole buffer; trailing or missing bytes are
//! rejected.

use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRNNBF01";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub config: String,
    pub layout: String,
}

fn put_u32(buf: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| NnError::Checkpoint(format!("{x} does not fit in u32")))?;
    buf.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NnError::Checkpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| NnError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn push<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().iter().map(|x| x.as_f64() as f32).collect(),
        });
    }

    /// Append every parameter of the store under its registered name.
    pub fn push_params<T: Real>(&mut self, store: &ParamStore<T>) {
        for id in store.ids() {
            self.push(store.name(id), store.value(id));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self
            .get(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing record `{name}`")))?;
        Tensor::new(&r.shape, r.data.iter().map(|&x| T::lit(x as f64)).collect())
    }

    /// Copy stored values into every parameter of `store`; shapes must match.
    pub fn load_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t: Tensor<T> = self.tensor(&name)?;
            if t.shape() != store.value(id).shape() {
                return Err(NnError::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, self.records.len())?;
        for r in &self.records {
            put_u32(&mut buf, r.name.len())?;
            buf.extend_from_slice(r.name.as_bytes());
            put_u32(&mut buf, r.shape.len())?;
            for &d in &r.shape {
                put_u32(&mut buf, d)?;
            }
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(NnError::Checkpoint(format!("record `{}` data/shape mismatch", r.name)));
            }
            for x in &r.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        put_u32(&mut buf, self.config.len())?;
        buf.extend_from_slice(self.config.as_bytes());
        put_u32(&mut buf, self.layout.len())?;
        buf.extend_from_slice(self.layout.as_bytes());
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic bytes".into()));
        }
        let count = rd.u32("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name = rd.string("record name")?;
            let rank = rd.u32("rank")?;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(rd.u32("dims")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| NnError::Checkpoint(format!("record `{name}` is too large")))?;
            let data = rd
                .take(n, "tensor data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            records.push(Record { name, shape, data });
        }
        let config = rd.string("config")?;
        let layout = rd.string("layout")?;
        if rd.pos != buf.len() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing bytes after layout descriptor",
                buf.len() - rd.pos
            )));
        }
        Ok(Self {
            records,
            config,
            layout,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
