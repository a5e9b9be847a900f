//! Checkpoint container: `MIMECKPT`, a little-endian `u32` manifest length,
//! a JSON manifest (config, vocabulary, grouping, tensor table) and the raw
//! little-endian tensor payload.

use std::path::Path;

use autodiff::{DType, Element, ParamStore, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::emotion::{EmotionGrouping, Polarity};
use crate::error::{MimeError, Result};
use crate::model::Mime;
use crate::MimeRng;

pub const MAGIC: &[u8; 8] = b"MIMECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupingEntry {
    positive: Vec<String>,
    negative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    grouping: GroupingEntry,
    pub tensors: Vec<TensorEntry>,
}

/// A model rebuilt from a checkpoint together with its parameters.
pub struct LoadedModel<T> {
    pub model: Mime,
    pub store: ParamStore<T>,
    pub vocab: Vocabulary,
}

pub fn to_bytes<T: Element>(model: &Mime, store: &ParamStore<T>, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if vocab.len() != model.vocab_size {
        return Err(MimeError::VocabMismatch(format!(
            "model has {} word rows, vocabulary has {} entries",
            model.vocab_size,
            vocab.len()
        )));
    }
    let mut payload = Vec::with_capacity(store.num_elements() * T::DTYPE.size());
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let offset = payload.len();
        for &x in p.value.data() {
            x.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: T::DTYPE.name().to_string(),
            shape: p.value.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let label = |p| model.grouping.labels(p).into_iter().map(String::from).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        vocabulary: vocab.clone(),
        grouping: GroupingEntry {
            positive: label(Polarity::Positive),
            negative: label(Polarity::Negative),
        },
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| MimeError::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| MimeError::Checkpoint("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Element>(path: &Path, model: &Mime, store: &ParamStore<T>, vocab: &Vocabulary) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model, store, vocab)?)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let bad = |m: &str| MimeError::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing MIMECKPT header"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("manifest runs past end of file"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| MimeError::Checkpoint(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(MimeError::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok((manifest, &bytes[12 + len..]))
}

fn decode_tensor<T: Element>(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<T>> {
    let dtype = DType::parse(&entry.dtype)
        .ok_or_else(|| MimeError::Checkpoint(format!("{}: unknown dtype {:?}", entry.name, entry.dtype)))?;
    let count: usize = entry.shape.iter().product();
    if entry.length != count * dtype.size() {
        return Err(MimeError::Checkpoint(format!("{}: length does not match shape", entry.name)));
    }
    let end = entry
        .offset
        .checked_add(entry.length)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| MimeError::Checkpoint(format!("{}: data out of bounds", entry.name)))?;
    let raw = &payload[entry.offset..end];
    let data: Vec<T> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
    };
    Ok(Tensor::new(&entry.shape, data)?)
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<LoadedModel<T>> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut spans: Vec<(usize, usize)> = manifest.tensors.iter().map(|t| (t.offset, t.length)).collect();
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].0 + w[0].1 > w[1].0) {
        return Err(MimeError::Checkpoint("tensor data ranges overlap".into()));
    }
    let grouping = EmotionGrouping::from_labels(&manifest.grouping.positive, &manifest.grouping.negative)?;
    let mut store = ParamStore::<T>::new();
    let mut rng = MimeRng::seed_from_u64(0);
    let model = Mime::new(
        manifest.config.clone(),
        grouping,
        manifest.vocabulary.len(),
        &mut store,
        &mut rng,
    )?;
    let mut filled = vec![false; store.len()];
    for entry in &manifest.tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| MimeError::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        if std::mem::replace(&mut filled[id.index()], true) {
            return Err(MimeError::Checkpoint(format!("tensor {} stored twice", entry.name)));
        }
        let t = decode_tensor::<T>(entry, payload)?;
        if t.shape() != store.value(id).shape() {
            return Err(MimeError::Checkpoint(format!(
                "{}: shape {:?}, model expects {:?}",
                entry.name,
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        let id = store.ids().nth(missing).expect("index in range");
        return Err(MimeError::Checkpoint(format!("missing tensor {}", store.name(id))));
    }
    Ok(LoadedModel {
        model,
        store,
        vocab: manifest.vocabulary,
    })
}

pub fn load<T: Element>(path: &Path) -> Result<LoadedModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| MimeError::io(path, e))?;
    from_bytes(&bytes)
}
