//! Self-describing named-array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "XVCKPT01"
//! u32    metadata length, then UTF-8 `key=value` lines
//! u32    entry count
//! entry: u16 name length, UTF-8 name, u8 rank, u32 per dim, f32 values
//! [u8; 32] SHA-256 of every preceding byte
//! ```

use std::path::Path;

use candle_core::{Device, Tensor};
use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams, ParamStore, RngState};
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"XVCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: IndexMap<String, String>,
    pub arrays: IndexMap<String, Array>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint { offset: 0, msg: format!("unencodable metadata key {k:?}") });
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            let n: usize = arr.shape.iter().product();
            if n != arr.data.len() || name.len() > u16::MAX as usize || arr.shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint { offset: out.len() as u64, msg: format!("malformed entry {name}") });
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(arr.shape.len() as u8);
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| r.err(meta_at, "metadata is not UTF-8"))?;
        let meta = parse_kv(meta_text).map_err(|e| r.err(meta_at, &e.to_string()))?;
        let count = r.u32()? as usize;
        let mut arrays = IndexMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err(at, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| r.err(at, "entry size overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err(at, "entry size overflows"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if arrays.insert(name.clone(), Array { shape, data }).is_some() {
                return Err(r.err(at, &format!("duplicate entry {name}")));
            }
        }
        let body_end = r.pos;
        let digest = r.take(32)?;
        if digest != Sha256::digest(&bytes[..body_end]).as_slice() {
            return Err(r.err(body_end, "checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after checksum"));
        }
        Ok(Container { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            offset: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        Container::decode(&bytes)
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint { offset: 0, msg: format!("missing metadata {key}") })?;
        parse_value(key, v)
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            self.arrays.insert(
                format!("{prefix}{name}"),
                Array {
                    shape: var.dims().to_vec(),
                    data: store.values(name)?,
                },
            );
        }
        Ok(())
    }

    /// Collects entries under `prefix` into a store, checking them against
    /// `reference` names and shapes when given.
    pub fn extract_store(&self, prefix: &str, reference: Option<&ParamStore>) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, arr) in &self.arrays {
            let Some(short) = name.strip_prefix(prefix) else { continue };
            if let Some(r) = reference {
                let Some(var) = r.var(short) else {
                    return Err(Error::ConfigMismatch(format!("unexpected entry {name}")));
                };
                if var.dims() != arr.shape.as_slice() {
                    return Err(Error::ConfigMismatch(format!(
                        "entry {name} has shape {:?}, config implies {:?}",
                        arr.shape,
                        var.dims()
                    )));
                }
            }
            store.insert(short, Tensor::from_slice(&arr.data, arr.shape.as_slice(), &Device::Cpu)?)?;
        }
        if let Some(r) = reference {
            if let Some((missing, _)) = r.iter().find(|(n, _)| !store.contains(n)) {
                return Err(Error::ConfigMismatch(format!("checkpoint lacks {prefix}{missing}")));
            }
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint { offset: offset as u64, msg: msg.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(
                self.pos,
                &format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn put_rng(meta: &mut IndexMap<String, String>, prefix: &str, rng: &RngState) {
    meta.insert(format!("{prefix}rng_seed"), hex::encode(rng.seed));
    meta.insert(format!("{prefix}rng_stream"), rng.stream.to_string());
    meta.insert(format!("{prefix}rng_word_pos"), rng.word_pos.to_string());
}

pub(crate) fn get_rng(c: &Container, prefix: &str) -> Result<RngState> {
    let seed_hex: String = c.meta_value(&format!("{prefix}rng_seed"))?;
    let bytes = hex::decode(&seed_hex).map_err(|_| Error::Checkpoint { offset: 0, msg: "bad rng seed".into() })?;
    let seed: [u8; 32] = bytes
        .try_into()
        .map_err(|_| Error::Checkpoint { offset: 0, msg: "rng seed must be 32 bytes".into() })?;
    Ok(RngState {
        seed,
        stream: c.meta_value(&format!("{prefix}rng_stream"))?,
        word_pos: c.meta_value(&format!("{prefix}rng_word_pos"))?,
    })
}

pub(crate) fn put_adam(c: &mut Container, state: &AdamState) {
    c.meta.insert("opt.t".into(), state.t.to_string());
    for (name, m) in &state.m {
        c.arrays.insert(format!("opt.m.{name}"), Array { shape: vec![m.len()], data: m.clone() });
    }
    for (name, v) in &state.v {
        c.arrays.insert(format!("opt.v.{name}"), Array { shape: vec![v.len()], data: v.clone() });
    }
}

pub(crate) fn get_adam(c: &Container) -> Result<Option<AdamState>> {
    if !c.meta.contains_key("opt.t") {
        return Ok(None);
    }
    let mut state = AdamState { t: c.meta_value("opt.t")?, ..Default::default() };
    for (name, arr) in &c.arrays {
        if let Some(n) = name.strip_prefix("opt.m.") {
            state.m.insert(n.to_string(), arr.data.clone());
        } else if let Some(n) = name.strip_prefix("opt.v.") {
            state.v.insert(n.to_string(), arr.data.clone());
        }
    }
    Ok(Some(state))
}

/// Writes backbone parameters, config, step, RNG and optional optimizer state.
pub fn save_checkpoint(params: &ModelParams, optimizer: Option<&AdamState>, path: &Path) -> Result<()> {
    let mut c = Container::default();
    c.meta.insert("kind".into(), "backbone".into());
    c.meta.extend(parse_kv(&params.config.to_kv())?);
    c.meta.insert("step".into(), params.step.to_string());
    put_rng(&mut c.meta, "", &params.rng);
    c.insert_store("model.", &params.store)?;
    if let Some(state) = optimizer {
        put_adam(&mut c, state);
    }
    c.save(path)
}

/// Reads a backbone checkpoint. With `expected` set, a differing stored
/// config is rejected instead of being adopted.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams, Option<AdamState>)> {
    let c = Container::load(path)?;
    backbone_from_container(&c, expected)
}

pub(crate) fn backbone_from_container(
    c: &Container,
    expected: Option<&ModelConfig>,
) -> Result<(ModelParams, Option<AdamState>)> {
    if c.meta.get("kind").map(String::as_str) != Some("backbone") {
        return Err(Error::Checkpoint { offset: 0, msg: "not a backbone checkpoint".into() });
    }
    let mut config = ModelConfig::default();
    config.apply_kv(&c.meta)?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config differs from requested config:\n{}vs\n{}",
                config.to_kv(),
                exp.to_kv()
            )));
        }
    }
    let reference = init_params(&config, 0)?;
    let store = c.extract_store("model.", Some(&reference.store))?;
    let params = ModelParams { config, store, step: c.meta_value("step")?, rng: get_rng(c, "")? };
    Ok((params, get_adam(c)?))
}

/// Hex SHA-256 of the serialized parameter values and config.
pub fn params_hash(params: &ModelParams) -> Result<String> {
    let mut c = Container::default();
    c.meta.extend(parse_kv(&params.config.to_kv())?);
    c.insert_store("model.", &params.store)?;
    Ok(hex::encode(Sha256::digest(c.encode()?)))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
