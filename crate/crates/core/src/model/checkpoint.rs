//! Binary checkpoint: `CSEM`, version, length-prefixed canonical JSON config,
//! then a tensor table of little-endian f32 values.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CSEM";
const VERSION: u32 = 1;

/// Config JSON with keys sorted and no whitespace.
pub fn canonical_config_json(cfg: &ModelConfig) -> Result<String> {
    let v = serde_json::to_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &Parameters) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = canonical_config_json(cfg)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Parameters)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()?;
    let cfg: ModelConfig =
        serde_json::from_slice(c.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    cfg.validate()?;
    let count = c.u32()?;
    let mut params = Parameters::default();
    for _ in 0..count {
        let n = c.u32()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if params.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::from_vec(&shape, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    params.validate(&cfg)?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(cfg, params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, Parameters)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
