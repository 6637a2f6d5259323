//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TSFCKPT\0" | version u32
//! config   u32 length + UTF-8 JSON
//! vocab    u64 hash | event tokens | attribute tokens
//!          (each list: u32 count, then u32 length + UTF-8 per token)
//! tensors  u32 count, then per tensor:
//!          u32 length + UTF-8 name | u8 rank | u32 dims | f64 data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{TokenMap, Vocab};
use crate::numerics::Tensor;

use super::config::RunConfig;
use super::model::Model;

pub const MAGIC: &[u8; 8] = b"TSFCKPT\0";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents before they are bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab_hash: u64,
    pub vocab: Vocab,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, vocab: &Vocab, model: &Model) -> Self {
        Self {
            config: config.clone(),
            vocab_hash: vocab.hash(),
            vocab: vocab.clone(),
            tensors: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.config).expect("config serializes"));
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        for map in [&self.vocab.event_types, &self.vocab.attr_types] {
            let toks = map.data_tokens();
            out.extend_from_slice(&(toks.len() as u32).to_le_bytes());
            for t in toks {
                put_str(&mut out, t);
            }
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds the model, checking the vocabulary digest and that every
    /// stored tensor matches the architecture named by the config.
    pub fn into_model(self) -> Result<(RunConfig, Vocab, Model)> {
        if self.vocab.hash() != self.vocab_hash {
            return Err(Error::Compatibility(format!(
                "stored vocabulary hash {:016x} does not match its tokens ({:016x})",
                self.vocab_hash,
                self.vocab.hash()
            )));
        }
        let mut model = Model::new(&self.config, &self.vocab, 1.0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} tensors, checkpoint has {}",
                model.params.len(),
                self.tensors.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(self.tensors) {
            if model.params.name(id) != name || model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    model.params.name(id),
                    model.params.get(id).shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
            }
            *model.params.get_mut(id) = t;
        }
        Ok((self.config, self.vocab, model))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tokens(&mut self, what: &str) -> Result<TokenMap> {
        let n = self.u32(what)? as usize;
        // every token costs at least its 4-byte length prefix
        if n > (self.buf.len() - self.pos) / 4 {
            return Err(Error::Checkpoint(format!("{what} count {n} exceeds the file")));
        }
        let toks = (0..n).map(|_| self.string(what)).collect::<Result<Vec<_>>>()?;
        let map = TokenMap::from_tokens(toks);
        if map.data_tokens().len() != n {
            return Err(Error::Checkpoint(format!("{what} has duplicate or reserved tokens")));
        }
        Ok(map)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = RunConfig::from_json(&r.string("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab_hash = r.u64("vocab hash")?;
    let event_types = r.tokens("event tokens")?;
    let attr_types = r.tokens("attribute tokens")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u8("tensor rank")? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n <= (bytes.len() - r.pos) / 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} shape {shape:?} does not fit the file")))?;
        let data = r
            .take(len * 8, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        vocab_hash,
        vocab: Vocab { event_types, attr_types },
        tensors,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
