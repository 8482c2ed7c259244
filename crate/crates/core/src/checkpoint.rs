//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `D3NT` | u32 version | u32 len + config text | records until EOF,
//! each record `u32 len + name | u32 rank | u32 extents... | f64 values...`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::ModelState;

pub const MAGIC: &[u8; 4] = b"D3NT";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";
const STEP: &str = "adam.t";

#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar = f64> {
    pub config: RunConfig,
    pub state: ModelState<S>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Runtime(format!("checkpoint field {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                kind: "checkpoint",
                offset: self.pos,
                detail: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn fail(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            offset: at,
            detail: detail.into(),
        }
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.emit();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.state.params.iter() {
            put_tensor(&mut out, name, t)?;
        }
        for (name, t) in self.state.m.iter() {
            put_tensor(&mut out, &format!("{MOMENT1}{name}"), t)?;
        }
        for (name, t) in self.state.v.iter() {
            put_tensor(&mut out, &format!("{MOMENT2}{name}"), t)?;
        }
        put_tensor(&mut out, STEP, &Tensor::<S>::scalar(S::lit(self.state.t as f64)))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail(0, "bad magic, expected D3NT"));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let len = r.u32("config length")?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config block")?).map_err(|_| r.fail(at, "config is not UTF-8"))?;
        let config = RunConfig::parse(text)?;

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut t = None;
        while r.pos < bytes.len() {
            let start = r.pos;
            let n = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| r.fail(start + 4, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail(start, "extent overflow"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.fail(start, "size overflow"))?, "values")?;
            let data: Vec<S> = raw
                .chunks_exact(8)
                .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            if !tensor.is_finite() {
                return Err(r.fail(start, format!("{name}: non-finite values")));
            }
            let dup = if name == STEP {
                t.replace(tensor.data()[0].as_f64() as u64).is_some()
            } else if let Some(k) = name.strip_prefix(MOMENT1) {
                m.insert(k, tensor).is_some()
            } else if let Some(k) = name.strip_prefix(MOMENT2) {
                v.insert(k, tensor).is_some()
            } else {
                params.insert(name.clone(), tensor).is_some()
            };
            if dup {
                return Err(r.fail(start, format!("duplicate record {name}")));
            }
        }
        let t = t.ok_or_else(|| r.fail(bytes.len(), "missing optimizer step record"))?;
        for store in [&m, &v] {
            if !store.is_empty() && !store.names().eq(params.names()) {
                return Err(r.fail(bytes.len(), "optimizer moments do not match parameter names"));
            }
        }
        Ok(Checkpoint {
            config,
            state: ModelState { params, m, v, t },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}
