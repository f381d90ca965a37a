//! Binary checkpoint format:
//!
//! ```text
//! "HTRC" | version: u32 LE | header_len: u32 LE | header (UTF-8 JSON)
//!        | payload (little-endian tensors) | crc32(payload): u32 LE
//! ```
//!
//! The header names every tensor with its dtype, shape and byte offset into
//! the payload, and carries the model hyperparameters and vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, HtrError, Result};
use crate::tensor::{Adam, AdamConfig, AdamState, Scalar, Tensor};
use crate::transducer::{CharVocab, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"HTRC";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus the training bookkeeping needed to resume or audit it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Option<Adam<T>>,
    pub step: u64,
    /// False for a freshly initialized model that never saw an update.
    pub trained: bool,
    pub val_cer: Option<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn untrained(model: Model<T>) -> Self {
        Self { model, optimizer: None, step: 0, trained: false, val_cer: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    /// Parameter name → update count; moments are stored as tensors
    /// `adam.m/<name>` and `adam.v/<name>`.
    steps: BTreeMap<String, u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    vocab: CharVocab,
    step: u64,
    trained: bool,
    val_cer: Option<f64>,
    optimizer: Option<OptimizerHeader>,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
}

fn malformed(m: impl Into<String>) -> HtrError {
    CheckpointError::MalformedHeader(m.into()).into()
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let dtype = T::DTYPE.name().to_string();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
        tensors.push(TensorEntry { name, dtype: dtype.clone(), shape, offset: payload.len() });
        for &v in data {
            v.write_le(&mut payload);
        }
    };
    let store = &ckpt.model.params;
    for (_, name, t) in store.iter() {
        push(name.to_string(), t.shape().to_vec(), t.data());
    }
    let optimizer = ckpt.optimizer.as_ref().map(|adam| {
        let mut steps = BTreeMap::new();
        for (id, st) in adam.states() {
            let name = store.name(id);
            let shape = store.get(id).shape().to_vec();
            push(format!("adam.m/{name}"), shape.clone(), &st.m);
            push(format!("adam.v/{name}"), shape, &st.v);
            steps.insert(name.to_string(), st.step_count);
        }
        OptimizerHeader { config: adam.config, steps }
    });
    let header = Header {
        dtype: dtype.clone(),
        config: ckpt.model.config.clone(),
        vocab: ckpt.model.vocab.clone(),
        step: ckpt.step,
        trained: ckpt.trained,
        val_cer: ckpt.val_cer,
        optimizer,
        payload_bytes: payload.len(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| HtrError::Format(format!("header serialization: {e}")))?;
    let header_len = u32::try_from(header.len()).map_err(|_| HtrError::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HtrError::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(CheckpointError::Truncated)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parses checkpoint bytes.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(CheckpointError::BadMagic.into()),
        None => return Err(CheckpointError::Truncated.into()),
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or(CheckpointError::Truncated)?;
    let text = std::str::from_utf8(header_bytes).map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let start = 12 + header_len;
    let expected_end = start.checked_add(header.payload_bytes).and_then(|e| e.checked_add(4)).ok_or_else(|| malformed("payload size overflow"))?;
    if bytes.len() < expected_end {
        return Err(CheckpointError::Truncated.into());
    }
    if bytes.len() > expected_end {
        return Err(malformed(format!("{} trailing bytes after checksum", bytes.len() - expected_end)));
    }
    let payload = &bytes[start..start + header.payload_bytes];
    let stored = read_u32(bytes, start + header.payload_bytes)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }
    let want = T::DTYPE.name();
    if header.dtype != want {
        return Err(CheckpointError::DtypeMismatch { expected: want.into(), found: header.dtype }.into());
    }

    let size = T::DTYPE.size();
    let mut tensors: HashMap<&str, Tensor<T>> = HashMap::new();
    for e in &header.tensors {
        if e.dtype != want {
            return Err(CheckpointError::DtypeMismatch { expected: want.into(), found: e.dtype.clone() }.into());
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n * size).ok_or_else(|| malformed("tensor extent overflow"))?;
        let raw = payload.get(e.offset..end).ok_or_else(|| malformed(format!("tensor {} lies outside the payload", e.name)))?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        if tensors.insert(&e.name, Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(malformed(format!("duplicate tensor {}", e.name)));
        }
    }

    let mut model = Model::<T>::new(header.config.clone(), header.vocab.clone(), 0)
        .map_err(|e| malformed(format!("unusable hyperparameters: {e}")))?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in &ids {
        let name = model.params.name(*id).to_string();
        let src = tensors
            .remove(name.as_str())
            .ok_or_else(|| CheckpointError::HyperparameterMismatch(format!("tensor {name} missing")))?;
        let dst = model.params.get_mut(*id);
        if src.shape() != dst.shape() {
            return Err(CheckpointError::HyperparameterMismatch(format!(
                "tensor {name} has shape {:?}, the architecture needs {:?}",
                src.shape(),
                dst.shape()
            ))
            .into());
        }
        dst.data_mut().copy_from_slice(src.data());
    }

    let optimizer = match header.optimizer {
        None => None,
        Some(opt) => {
            let mut adam = Adam::new(opt.config);
            for (name, step_count) in opt.steps {
                let id = model.params.id(&name).ok_or_else(|| malformed(format!("optimizer state for unknown tensor {name}")))?;
                let mut take = |kind: &str| {
                    tensors
                        .remove(format!("adam.{kind}/{name}").as_str())
                        .map(Tensor::into_data)
                        .ok_or_else(|| malformed(format!("optimizer {kind} for {name} missing")))
                };
                let (m, v) = (take("m")?, take("v")?);
                adam.set_state(id, AdamState { step_count, m, v, config: opt.config });
            }
            Some(adam)
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::HyperparameterMismatch(format!("unexpected tensor {extra}")).into());
    }
    Ok(Checkpoint { model, optimizer, step: header.step, trained: header.trained, val_cer: header.val_cer })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and insists its architecture equals `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint::<T>(path)?;
    if let Some(diff) = config_difference(&ckpt.model.config, expected) {
        return Err(CheckpointError::HyperparameterMismatch(diff).into());
    }
    Ok(ckpt)
}

/// First differing field between two configurations, as `path: a vs b`.
pub fn config_difference(found: &ModelConfig, expected: &ModelConfig) -> Option<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                x.iter().find_map(|(k, v)| walk(&format!("{path}.{k}"), v, y.get(k).unwrap_or(&Value::Null)))
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
                x.iter().zip(y).enumerate().find_map(|(i, (u, v))| walk(&format!("{path}[{i}]"), u, v))
            }
            _ if a == b => None,
            _ => Some(format!("{}: checkpoint has {a}, expected {b}", path.trim_start_matches('.'))),
        }
    }
    let a = serde_json::to_value(found).ok()?;
    let b = serde_json::to_value(expected).ok()?;
    walk("", &a, &b)
}
