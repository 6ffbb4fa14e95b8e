//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a JSON
//! manifest, a payload of little-endian `f64`s, and a 32-byte SHA-256 of
//! everything before it. The manifest carries the run config, counters, RNG
//! cursors, the tensor table and the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::diffcore::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::mar::ContextPairs;

pub const MAGIC: &[u8; 8] = b"COTRNCKP";
pub const VERSION: u32 = 2;
const HEADER_LEN: usize = 8 + 4 + 8;
const TRAILER_LEN: usize = 32;

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: need {expected} bytes, have {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Serializable cursor of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bad = || CheckpointError::Malformed("bad rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(self.seed.get(2 * i..2 * i + 2).ok_or_else(bad)?, 16)
                .map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f64`s from the start of the payload.
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    refresh_calls: u64,
    context_active: Vec<(usize, usize)>,
    context_refreshes: u64,
    context_tasks: Option<Vec<usize>>,
    rngs: BTreeMap<String, RngState>,
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    payload_sha256: String,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Training steps completed.
    pub step: u64,
    /// Parameters with Adam moments and step count.
    pub store: ParameterStore,
    pub rngs: BTreeMap<String, RngState>,
    pub context_active: Vec<(usize, usize)>,
    pub context_refreshes: u64,
    /// Cached context encodings from the last refresh.
    pub context_pairs: Option<ContextPairs>,
    /// Calls made to the refresh hook.
    pub refresh_calls: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn push_tensor(name: String, t: &Tensor, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        offset: (payload.len() / 8) as u64,
    });
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, p) in self.store.iter() {
            push_tensor(format!("param/{name}/value"), &p.value, &mut entries, &mut payload);
            push_tensor(format!("param/{name}/m"), &p.m, &mut entries, &mut payload);
            push_tensor(format!("param/{name}/v"), &p.v, &mut entries, &mut payload);
        }
        if let Some(c) = &self.context_pairs {
            push_tensor("context/x".into(), &c.x, &mut entries, &mut payload);
            push_tensor("context/y".into(), &c.y, &mut entries, &mut payload);
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            adam_step: self.store.step(),
            refresh_calls: self.refresh_calls,
            context_active: self.context_active.clone(),
            context_refreshes: self.context_refreshes,
            context_tasks: self.context_pairs.as_ref().map(|c| c.tasks.clone()),
            rngs: self.rngs.clone(),
            tensors: entries,
            payload_len: payload.len() as u64,
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + TRAILER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let truncated = |expected: u64| CheckpointError::Truncated {
            expected,
            found: bytes.len() as u64,
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(if bytes.len() < 8 && MAGIC.starts_with(bytes) {
                truncated(HEADER_LEN as u64)
            } else {
                CheckpointError::BadMagic
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN as u64));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = &bytes[HEADER_LEN..];
        if mlen > body.len() as u64 {
            return Err(truncated((HEADER_LEN as u64).saturating_add(mlen)));
        }
        let (json, payload) = body.split_at(mlen as usize);
        let m: Manifest = serde_json::from_slice(json)
            .map_err(|e| CheckpointError::Malformed(format!("manifest: {e}")))?;
        let full = (HEADER_LEN as u64)
            .checked_add(mlen)
            .and_then(|x| x.checked_add(m.payload_len))
            .and_then(|x| x.checked_add(TRAILER_LEN as u64))
            .ok_or_else(|| CheckpointError::Malformed("payload length overflows".into()))?;
        if (bytes.len() as u64) < full {
            return Err(truncated(full));
        }
        if bytes.len() as u64 > full {
            return Err(CheckpointError::Malformed("trailing bytes after checkpoint".into()));
        }
        let (signed, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        if Sha256::digest(signed).as_slice() != trailer {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let payload = &payload[..payload.len() - TRAILER_LEN];
        if sha256_hex(payload) != m.payload_sha256 {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let mut tensors = BTreeMap::new();
        for e in &m.tensors {
            let t = read_tensor(e, payload)?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {}", e.name)));
            }
        }
        let mut store = ParameterStore::new();
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))
        };
        let names: Vec<String> = m
            .tensors
            .iter()
            .filter_map(|e| e.name.strip_prefix("param/")?.strip_suffix("/value"))
            .map(str::to_string)
            .collect();
        for name in &names {
            let value = take(&format!("param/{name}/value"))?;
            let mo = take(&format!("param/{name}/m"))?;
            let ve = take(&format!("param/{name}/v"))?;
            if mo.shape() != value.shape() || ve.shape() != value.shape() {
                return Err(CheckpointError::Malformed(format!("moment shapes of {name}")));
            }
            store
                .insert(name.clone(), value)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let p = store.parameter_mut(name).expect("just inserted");
            p.m = mo;
            p.v = ve;
        }
        store.set_step(m.adam_step);
        let context_pairs = match m.context_tasks {
            Some(tasks) => {
                let x = take("context/x")?;
                let y = take("context/y")?;
                if x.shape().len() != 2 || x.shape() != y.shape() || x.rows() != tasks.len() {
                    return Err(CheckpointError::Malformed("context cache shapes".into()));
                }
                Some(ContextPairs { x, y, tasks })
            }
            None => None,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(CheckpointError::Malformed(format!("unexpected tensor {name}")));
        }
        for r in m.rngs.values() {
            r.restore()?;
        }
        Ok(Checkpoint {
            config: m.config,
            step: m.step,
            store,
            rngs: m.rngs,
            context_active: m.context_active,
            context_refreshes: m.context_refreshes,
            context_pairs,
            refresh_calls: m.refresh_calls,
        })
    }

    /// Fails with [`CheckpointError::ShapeMismatch`] (or `Malformed` for a
    /// missing or extra name) unless every parameter matches `reference`.
    pub fn check_shapes(&self, reference: &ParameterStore) -> std::result::Result<(), CheckpointError> {
        for (name, p) in reference.iter() {
            let found = self
                .store
                .get(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing parameter {name}")))?;
            if found.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.value.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.store.names().find(|n| !reference.contains(n)) {
            return Err(CheckpointError::Malformed(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

fn read_tensor(e: &TensorEntry, payload: &[u8]) -> std::result::Result<Tensor, CheckpointError> {
    let bad = || CheckpointError::Malformed(format!("tensor {} out of bounds", e.name));
    let n = e
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(bad)?;
    let start = usize::try_from(e.offset).ok().and_then(|o| o.checked_mul(8)).ok_or_else(bad)?;
    let end = n.checked_mul(8).and_then(|b| b.checked_add(start)).ok_or_else(bad)?;
    let raw = payload.get(start..end).ok_or_else(bad)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Malformed(err.to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.encode()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(Checkpoint::decode(&bytes)?)
}

/// SHA-256 of a checkpoint file's payload, validated first. This is the
/// identity reported by evaluation.
pub fn checkpoint_identity(bytes: &[u8]) -> std::result::Result<String, CheckpointError> {
    Checkpoint::decode(bytes)?;
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    Ok(sha256_hex(&bytes[HEADER_LEN + mlen..bytes.len() - TRAILER_LEN]))
}
