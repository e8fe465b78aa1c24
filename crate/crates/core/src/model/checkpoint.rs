//! Binary checkpoint container (little-endian):
//!
//! ```text
//! "SLMX" | u32 version | u32 len, config text | u32 tensor count |
//!   per tensor: u16 len, name | u8 frozen | u8 rank | rank × u64 dims | f32 data
//! ```
//!
//! The config text is `key=value` lines, optionally followed by
//! `tokenizer_id=<hex>` and a `lora rank=<r> alpha=<a>` line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::forward::Layout;
use crate::model::{LoraMeta, Model, ModelCheckpoint, ModelConfig, ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLMX";
pub const CHECKPOINT_VERSION: u32 = 1;

fn header_text(config: &ModelConfig, lora: Option<LoraMeta>, tokenizer_id: Option<&str>) -> String {
    let mut s = config.to_text();
    if let Some(id) = tokenizer_id {
        s += &format!("tokenizer_id={id}\n");
    }
    if let Some(l) = lora {
        s += &format!("lora rank={} alpha={}\n", l.rank, l.alpha);
    }
    s
}

pub(crate) fn encode_container(header: &str, params: &ParameterStore<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + header.len() + params.total_elements() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.frozen as u8);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
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
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode_container(buf: &[u8]) -> Result<(String, ParameterStore<f32>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let hlen = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("config text is not UTF-8: {e}")))?
        .to_owned();
    let count = r.u32()?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("tensor {name}: bad freeze flag {f}"))),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape overflow")))?;
        let bytes = r.take(numel.checked_mul(4).unwrap_or(usize::MAX)).map_err(|_| {
            Error::Checkpoint(format!("tensor {name}: data shorter than header shape {shape:?}"))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params
            .push(Tensor {
                name,
                shape,
                data,
                frozen,
            })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok((header, params))
}

pub(crate) struct Header {
    pub config: ModelConfig,
    pub lora: Option<LoraMeta>,
    pub tokenizer_id: Option<String>,
}

pub(crate) fn parse_header(text: &str) -> Result<Header> {
    let mut config = ModelConfig::tiny();
    let mut lora = None;
    let mut tokenizer_id = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("lora ") {
            let mut rank = None;
            let mut alpha = None;
            for kv in rest.split_whitespace() {
                match kv.split_once('=') {
                    Some(("rank", v)) => rank = v.parse().ok(),
                    Some(("alpha", v)) => alpha = v.parse().ok(),
                    _ => {}
                }
            }
            match (rank, alpha) {
                (Some(rank), Some(alpha)) => lora = Some(LoraMeta { rank, alpha }),
                _ => return Err(Error::Checkpoint(format!("bad lora header {line:?}"))),
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        if k == "tokenizer_id" {
            tokenizer_id = Some(v.to_owned());
        } else if !config.set(k, v)? {
            return Err(Error::Checkpoint(format!("unknown config key {k:?}")));
        }
    }
    Ok(Header {
        config,
        lora,
        tokenizer_id,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn checkpoint_bytes(model: &ModelCheckpoint) -> Vec<u8> {
    let header = header_text(&model.config, model.lora, model.tokenizer_id.as_deref());
    encode_container(&header, &model.params)
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_bytes(model))
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<ModelCheckpoint> {
    let (header, params) = decode_container(buf)?;
    let h = parse_header(&header)?;
    let model = Model {
        config: h.config,
        params,
        lora: h.lora,
        tokenizer_id: h.tokenizer_id,
    };
    Layout::resolve(&model)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&buf)
}

/// Writes only the adapter tensors of `model`, under a header carrying the
/// model config and the `lora rank= alpha=` line.
pub fn save_lora_delta(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    let lora = model.lora.ok_or(Error::NoAdapters)?;
    let mut delta = ParameterStore::new();
    for t in model.params.tensors() {
        if t.name.ends_with(super::forward::LORA_A) || t.name.ends_with(super::forward::LORA_B) {
            delta.push(t.clone())?;
        }
    }
    let header = header_text(&model.config, Some(lora), model.tokenizer_id.as_deref());
    write_file(path, &encode_container(&header, &delta))
}

pub fn load_lora_delta(path: &Path) -> Result<(LoraMeta, ParameterStore<f32>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, params) = decode_container(&buf)?;
    let lora = parse_header(&header)?
        .lora
        .ok_or_else(|| Error::Checkpoint("missing lora header line".into()))?;
    Ok((lora, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init};

    fn model() -> ModelCheckpoint {
        let mut m: ModelCheckpoint = init(&ModelConfig::tiny(), 2).unwrap();
        m.params.tensors_mut()[3].frozen = true;
        m.tokenizer_id = Some("abc123".into());
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.slmx");
        let m = model();
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back), fs::read(&p).unwrap());
        assert_eq!(forward(&back, &[1, 2]).unwrap(), forward(&m, &[1, 2]).unwrap());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = checkpoint_bytes(&model());
        bytes[0] = b'X';
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn bad_version_and_truncation() {
        let good = checkpoint_bytes(&model());
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&v), Err(Error::BadVersion(9))));
        let cut = &good[..good.len() - 3];
        assert!(checkpoint_from_bytes(cut).is_err());
    }

    #[test]
    fn shape_mismatch_against_config() {
        let mut m = model();
        m.config.dim = 16;
        m.config.n_heads = 2;
        let bytes = checkpoint_bytes(&m);
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
