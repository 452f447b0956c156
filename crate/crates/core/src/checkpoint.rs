//! Binary parameter checkpoints.
//!
//! Layout (little endian): the magic bytes `MVNE1`, a `u32` record count,
//! then per tensor a `u32`-length-prefixed UTF-8 name, a `u32` rank, one
//! `u64` per dimension and the row-major `f64` values. A `u64`-length-prefixed
//! key=value text block closes the file; it holds the training config plus
//! `checkpoint.*` entries for the config hash, the seed and the data shape.

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{param_specs, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{hash_text, TrainConfig};

pub const MAGIC: &[u8; 5] = b"MVNE1";

const HASH_KEY: &str = "checkpoint.config_hash";
const SEED_KEY: &str = "checkpoint.seed";
const FEATURES_KEY: &str = "checkpoint.features";
const VIEWS_KEY: &str = "checkpoint.views";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub features: usize,
    pub views: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Continue (with a warning) when the stored config hash does not match
    /// the stored config.
    pub allow_hash_mismatch: bool,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config: &TrainConfig) -> Result<()> {
    let features = params.encoders.first().map_or(0, |e| e.weight.rows());
    let views = params.encoders.len();
    let specs = param_specs(features, views, &config.model)?;
    let tensors = params.tensors();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (spec, t) in specs.iter().zip(&tensors) {
        buf.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut kv = config.to_key_values();
    kv.insert(HASH_KEY, config.hash());
    kv.insert(SEED_KEY, config.seed);
    kv.insert(FEATURES_KEY, features);
    kv.insert(VIEWS_KEY, views);
    let text = kv.to_text();
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn load_checkpoint(path: &Path, opts: LoadOptions) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!(
            "{} is not an MVNE1 checkpoint (bad magic or version)",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let text_len = r.u64()? as usize;
    let text = r.string(text_len)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut kv = KeyValues::parse(&text, path)?;
    let stored_hash = kv
        .remove(HASH_KEY)
        .ok_or_else(|| Error::Checkpoint("missing config hash".into()))?;
    let seed: Option<u64> = kv.parsed(SEED_KEY)?;
    let features: usize = kv
        .parsed(FEATURES_KEY)?
        .ok_or_else(|| Error::Checkpoint("missing feature count".into()))?;
    let views: usize = kv
        .parsed(VIEWS_KEY)?
        .ok_or_else(|| Error::Checkpoint("missing view count".into()))?;
    for k in [SEED_KEY, FEATURES_KEY, VIEWS_KEY] {
        kv.remove(k);
    }
    let computed = hash_text(&kv.to_text());
    if computed != stored_hash {
        if !opts.allow_hash_mismatch {
            return Err(Error::ConfigHashMismatch {
                stored: stored_hash,
                computed,
            });
        }
        warn!(
            "{}: config hash mismatch (stored {stored_hash}, recomputed {computed}); proceeding",
            path.display()
        );
    }
    let (config, _) = TrainConfig::from_key_values(&kv)?;
    if seed.is_some_and(|s| s != config.seed) {
        return Err(Error::Checkpoint("seed entry disagrees with the config".into()));
    }
    let specs = param_specs(features, views, &config.model)?;
    let params = ModelParams::from_named(named, &specs)?;
    Ok(Checkpoint {
        config,
        params,
        features,
        views,
    })
}
