//! Binary checkpoints: a JSON header (config, vocabulary, parameter table),
//! little-endian `f64` parameter data and a SHA-256 trailer over both.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"RGTXCKP1";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    vocab: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Serialises the model. Equal models give equal bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.cfg.clone(),
        vocab_hash: model.vocab.hash(),
        vocab: model.vocab.to_file_string(),
        params: model
            .store
            .iter()
            .map(|(_, name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + model.store.num_scalars() * 8 + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from checkpoint bytes. Any mismatch between the
/// recorded parameter table and the one implied by the config is an
/// integrity error.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file or truncated header".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch: file is corrupt or truncated".into()));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&body[MAGIC.len()..MAGIC.len() + 8]);
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    let hend = start
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("header length exceeds file size".into()))?;
    let header: Header =
        serde_json::from_slice(&body[start..hend]).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let vocab = Vocabulary::from_file_string(&header.vocab)?;
    if vocab.hash() != header.vocab_hash {
        return Err(Error::Integrity(format!(
            "embedded vocabulary hash {} does not match its contents ({})",
            header.vocab_hash,
            vocab.hash()
        )));
    }
    let mut model = Model::new(&header.config, vocab, 0)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} parameters, config implies {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let data = &body[hend..];
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if data.len() != expected * 8 {
        return Err(Error::Integrity(format!("parameter block has {} bytes, expected {}", data.len(), expected * 8)));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    let mut off = 0;
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let t = model.store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Integrity(format!("parameter {} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
        }
        for v in t.data_mut() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&data[off..off + 8]);
            *v = f64::from_le_bytes(b);
            off += 8;
        }
    }
    for ((_, name, _), entry) in model.store.iter().zip(&header.params) {
        if name != entry.name {
            return Err(Error::Integrity(format!("parameter {} found where {} was expected", entry.name, name)));
        }
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads and checks the checkpoint against an expected configuration and
/// vocabulary. A differing config field is a configuration error naming the
/// field; a differing vocabulary is refused with both hashes.
pub fn load_expecting(path: &Path, config: Option<&ModelConfig>, vocab: Option<&Vocabulary>) -> Result<Model> {
    let model = load(path)?;
    if let Some(v) = vocab {
        let (want, have) = (v.hash(), model.vocab.hash());
        if want != have {
            return Err(Error::Integrity(format!(
                "vocabulary hash mismatch: checkpoint has {have}, expected {want}"
            )));
        }
    }
    if let Some(cfg) = config {
        if let Some(field) = first_difference(&model.cfg, cfg)? {
            return Err(Error::Config(format!("checkpoint config differs in field `{field}`")));
        }
    }
    Ok(model)
}

/// Dotted path of the first differing field between two configs.
pub fn first_difference(a: &ModelConfig, b: &ModelConfig) -> Result<Option<String>> {
    let to_value = |c: &ModelConfig| serde_json::to_value(c).map_err(|e| Error::Parse(e.to_string()));
    Ok(diff_value(&to_value(a)?, &to_value(b)?, ""))
}

fn diff_value(a: &Value, b: &Value, path: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_value(u, v, &p),
                    _ => Some(p),
                }
            })
        }
        _ => (a != b).then(|| path.to_string()),
    }
}
