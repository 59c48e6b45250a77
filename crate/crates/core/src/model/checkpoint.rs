//! Binary checkpoint container.
//!
//! Layout: `NLCK`, a little-endian `u32` version, a `u64` header length, a
//! JSON header, then every tensor's data as little-endian `f64` in header
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::numtok::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAMS_GROUP: &str = "params";

/// A model plus any extra named tensor groups (optimizer moments, loss
/// scales) and free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: BTreeMap<String, ParamSet>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            state: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    vocab_hash: String,
    keywords: Vec<Vec<String>>,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: [usize; 2],
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let groups = std::iter::once((PARAMS_GROUP, &ckpt.model.params))
        .chain(ckpt.state.iter().map(|(k, v)| (k.as_str(), v)));
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (group, set) in groups {
        for (name, t) in set.iter() {
            entries.push(Entry {
                group: group.to_string(),
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
            });
            data.reserve(t.len() * 8);
            for x in t.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        config: ckpt.model.config.clone(),
        vocab: ckpt.model.vocab.tokens().to_vec(),
        vocab_hash: ckpt.model.vocab.hash(),
        keywords: ckpt.model.keywords().to_vec(),
        tensors: entries,
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    if vocab.hash() != header.vocab_hash {
        return Err(bad("vocabulary hash mismatch"));
    }

    let mut cursor = 16 + hlen;
    let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
    for e in header.tensors {
        let n = e.shape[0] * e.shape[1];
        let raw = bytes
            .get(cursor..cursor + n * 8)
            .ok_or_else(|| bad("truncated tensor data"))?;
        cursor += n * 8;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        groups
            .entry(e.group)
            .or_default()
            .push(e.name, Tensor::from_rows(e.shape[0], e.shape[1], data)?)?;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let params = groups
        .remove(PARAMS_GROUP)
        .ok_or_else(|| bad("no model parameters"))?;
    let model = Model::with_keywords(header.config, vocab, params, &header.keywords)?;
    Ok(Checkpoint {
        model,
        state: groups,
        meta: header.meta,
    })
}
