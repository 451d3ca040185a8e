//! Binary checkpoint: model config plus every named tensor as little-endian f32.
//!
//! Layout: magic string, JSON model config, tensor count, then per tensor its
//! name, a trainable flag, the dims and the values. Strings are u32-length
//! prefixed; all integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "m2s-ckpt/1";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn to_bytes(cfg: &ModelConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_str(&mut out, FORMAT_VERSION);
    let json = serde_json::to_string(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_str(&mut out, &json);
    out.extend((params.len() as u32).to_le_bytes());
    for e in params.entries() {
        put_str(&mut out, &e.name);
        out.push(e.trainable as u8);
        out.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { buf, pos: 0 };
    let version = r
        .string()
        .map_err(|_| Error::Checkpoint("not a checkpoint file".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{version}`, expected `{FORMAT_VERSION}`"
        )));
    }
    let cfg: ModelConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store
            .insert(&name, Tensor::new(&shape, data)?, trainable)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok((cfg, store))
}

/// Write atomically via a temporary file in the same directory.
pub fn save(path: &Path, cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    let bytes = to_bytes(cfg, params)?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// Round every value to f32 precision, matching what a save/load cycle keeps.
pub fn quantize(params: &mut ParamStore) {
    for i in 0..params.len() {
        for v in params.value_mut(i).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        store
            .insert(
                "a",
                Tensor::new(&[2, 2], vec![1.0, -2.5, 0.125, 3.0]).unwrap(),
                true,
            )
            .unwrap();
        store
            .insert(
                "emb",
                Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
                false,
            )
            .unwrap();
        let bytes = to_bytes(&cfg, &store).unwrap();
        let (cfg2, store2) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        let mut q = store.clone();
        quantize(&mut q);
        assert_eq!(q, store2);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"junk").is_err());
    }
}
