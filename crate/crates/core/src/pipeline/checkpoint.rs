//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFA2CKPT" version:u32
//! stage:u8 step:u64 seed:u64 meta_len:u32 meta_json meta_crc:u32
//! tensor_count:u32
//! per tensor: name_len:u16 name rank:u8 dims:u32[rank] frozen:u8 crc:u32 payload:f32[numel]
//! ```
//!
//! `meta_json` holds the model configuration and the low-rank delta table.
//! Each payload carries its own CRC-32, so a single flipped byte is caught
//! and attributed to a tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::LowRankDelta;
use crate::error::{Error, Result};
use crate::state::{ModelConfig, ModelState};
use crate::substrate::{ParamStore, ParamTensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFA2CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    lora: BTreeMap<String, LowRankDelta>,
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(state.stage);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        config: state.config.clone(),
        lora: state.lora.clone(),
    })?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&crc32fast::hash(&meta).to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for t in state.params.iter() {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name {} too long", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(t.frozen as u8);
        let payload: Vec<u8> = t
            .values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let stage = r.u8("stage")?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    if r.u32("metadata checksum")? != crc32fast::hash(meta_bytes) {
        return Err(Error::Integrity("metadata".into()));
    }
    let meta: Meta = serde_json::from_slice(meta_bytes)?;
    let mut config = meta.config;
    config.vocab = config.vocab.reindexed()?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&name)? as usize);
        }
        let frozen = match r.u8(&name)? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("{name}: bad frozen flag {b}"))),
        };
        let crc = r.u32(&name)?;
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4, &name)?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity(name));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        let mut t = ParamTensor::new(name, dims, values)?;
        t.frozen = frozen;
        params.insert(t)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ModelState {
        params,
        config,
        lora: meta.lora,
        stage,
        step,
        seed,
    })
}
