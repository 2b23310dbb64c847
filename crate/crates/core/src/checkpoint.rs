//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DBVAECK1"
//! header    u32 length + UTF-8 "key=value" lines
//! count     u32
//! record*   u32 name length, name, u8 dtype (1 = f64), u32 ndim,
//!           u64 dims[ndim], f64 payload (row-major)
//! checksum  32 bytes, SHA-256 of everything above
//! ```
//!
//! Floats in the header are written with `{:?}` so they parse back to the
//! identical bit pattern.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DBVAECK1";
const DTYPE_F64: u8 = 1;
const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub vocab_hash: String,
    /// Free-form provenance (epoch, phase, seed, ...).
    pub meta: BTreeMap<String, String>,
}

fn config_header(c: &ModelConfig, vocab_hash: &str) -> BTreeMap<String, String> {
    let mut h = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        h.insert(k.to_string(), v);
    };
    put("format", FORMAT_VERSION.into());
    put("mode", c.mode.to_string());
    put("slices", c.slices.to_string());
    put("codebook_size", c.codebook_size.to_string());
    put("latent_dim", c.latent_dim.to_string());
    put("alpha", format!("{:?}", c.alpha));
    put("beta", format!("{:?}", c.beta));
    put("vocab_size", c.vocab_size.to_string());
    put("vocab_hash", vocab_hash.to_string());
    put("latent_injection", c.latent_injection.to_string());
    put("embed_dim", c.embed_dim.to_string());
    put("hidden_dim", c.hidden_dim.to_string());
    put("dropout", format!("{:?}", c.dropout));
    h
}

fn parse_config(h: &BTreeMap<String, String>) -> Result<ModelConfig> {
    fn field<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let raw = h
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint header lacks {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Integrity(format!("checkpoint header {key}={raw:?} is malformed")))
    }
    if h.get("format").map(String::as_str) != Some(FORMAT_VERSION) {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint format {:?}",
            h.get("format")
        )));
    }
    Ok(ModelConfig {
        vocab_size: field(h, "vocab_size")?,
        embed_dim: field(h, "embed_dim")?,
        hidden_dim: field(h, "hidden_dim")?,
        latent_dim: field(h, "latent_dim")?,
        slices: field(h, "slices")?,
        codebook_size: field(h, "codebook_size")?,
        mode: field(h, "mode")?,
        alpha: field(h, "alpha")?,
        beta: field(h, "beta")?,
        dropout: field(h, "dropout")?,
        latent_injection: field(h, "latent_injection")?,
    })
}

const CONFIG_KEYS: [&str; 13] = [
    "format",
    "mode",
    "slices",
    "codebook_size",
    "latent_dim",
    "alpha",
    "beta",
    "vocab_size",
    "vocab_hash",
    "latent_injection",
    "embed_dim",
    "hidden_dim",
    "dropout",
];

impl Checkpoint {
    pub fn new(state: ModelState, vocab_hash: impl Into<String>) -> Self {
        Checkpoint {
            state,
            vocab_hash: vocab_hash.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = config_header(&self.state.config, &self.vocab_hash);
        for (k, v) in &self.meta {
            if CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::Argument(format!("meta key {k:?} is reserved")));
            }
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Argument(format!("meta entry {k:?} is not a single key=value line")));
            }
            header.insert(k.clone(), v.clone());
        }
        let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let records = self.state.named_tensors();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let header_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Integrity("checkpoint header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Integrity(format!("malformed header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let config = parse_config(&header)?;
        config.validate().map_err(|e| Error::Integrity(format!("checkpoint config invalid: {e}")))?;

        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("record name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Integrity(format!("record {name:?} has unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after the last record",
                body.len() - r.pos
            )));
        }

        // Layer structure comes from the config; values come from the records.
        let mut state = ModelState::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        state.load_tensors(records.iter().map(|(n, t)| (n.as_str(), t)))?;
        let vocab_hash = header.remove("vocab_hash").unwrap_or_default();
        for key in CONFIG_KEYS {
            header.remove(key);
        }
        Ok(Checkpoint {
            state,
            vocab_hash,
            meta: header,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
