//! Binary model container.
//!
//! Little-endian layout: magic `R2AU`, `u32` format version, `u32`-prefixed
//! canonical `ModelConfig` JSON, `u32` record count, then one record per
//! tensor: `u32`-prefixed UTF-8 name, `u32` rank, `rank × u32` extents and
//! the row-major `f32` payload. Parameters come first in build order,
//! followed by norm running statistics named `{norm}.running_mean` and
//! `{norm}.running_var`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"R2AU";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, dims.len());
    for &d in dims {
        put_u32(buf, d);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    let cfg = model.config().to_canonical();
    put_u32(&mut buf, cfg.len());
    buf.extend_from_slice(cfg.as_bytes());
    put_u32(&mut buf, model.params.len() + 2 * model.stats.len());
    for p in model.params.iter() {
        put_record(&mut buf, &p.name, &p.dims, &p.data);
    }
    for s in model.stats.iter() {
        put_record(&mut buf, &format!("{}.running_mean", s.name), &[s.mean.len()], &s.mean);
        put_record(&mut buf, &format!("{}.running_var", s.name), &[s.var.len()], &s.var);
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let cfg_text = r.string()?;
    let cfg = ModelConfig::from_canonical(&cfg_text)?;
    let mut model = build_model(&cfg, 0)?;

    let count = r.u32()?;
    let mut records: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}` is too large")))?;
        let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let mut fetch = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
        let (got, data) = records.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
        if got != dims {
            return Err(Error::Checkpoint(format!("record `{name}` has extents {got:?}, model expects {dims:?}")));
        }
        Ok(data)
    };
    for p in model.params.iter_mut() {
        p.data = fetch(&p.name, &p.dims)?;
    }
    for s in model.stats.iter_mut() {
        s.mean = fetch(&format!("{}.running_mean", s.name), &[s.mean.len()])?;
        s.var = fetch(&format!("{}.running_var", s.name), &[s.var.len()])?;
    }
    if let Some(extra) = records.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected record `{extra}`")));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
