//! Checkpoint directories: `manifest.json`, `tensors.bin` (little-endian
//! payload) and, for subword-aware variants, `vocab.txt`.

use std::path::Path;

use blockpool_tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build, Model, VariantSpec};
use crate::vocab::SubwordVocab;

pub const FORMAT: &str = "blockpool-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
pub const VOCAB: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub spec: VariantSpec,
    pub has_vocab: bool,
    pub tensors: Vec<TensorEntry>,
    /// Resolved run configuration, kept for provenance of the run.
    pub run_config: serde_json::Value,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &Model, dir: &Path, dtype: DType, run_config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (_, name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            match dtype {
                DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: dtype.as_str().into(),
        spec: model.spec.clone(),
        has_vocab: model.spec.vocab.is_some(),
        tensors,
        run_config,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write(&dir.join(TENSORS), &payload)?;
    if let Some(v) = &model.spec.vocab {
        write(&dir.join(VOCAB), v.to_text().as_bytes())?;
    }
    write(&dir.join(MANIFEST), format!("{json}\n").as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a {FORMAT} manifest", path.display())));
    }
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(VERSION) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {other:?}, expected {VERSION}"
            )))
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Rebuilds the model and fills every parameter from the payload. Nothing
/// is returned unless every tensor is present and complete.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let dtype = DType::parse(&manifest.dtype)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype {:?}", manifest.dtype)))?;
    let mut spec = manifest.spec.clone();
    if manifest.has_vocab {
        spec.vocab = Some(SubwordVocab::load(&dir.join(VOCAB))?);
    }
    spec.validate()?;
    let mut model = build(spec, 0)?;
    let path = dir.join(TENSORS);
    let payload = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let width = dtype.byte_width();
    let mut expected_len = 0;
    let ids: Vec<_> = model.store.ids().collect();
    if manifest.tensors.len() != ids.len() {
        let known: std::collections::HashSet<&str> = ids.iter().map(|&id| model.store.name(id)).collect();
        if let Some(extra) = manifest.tensors.iter().find(|t| !known.contains(t.name.as_str())) {
            return Err(Error::Checkpoint(format!("unexpected tensor {:?}", extra.name)));
        }
    }
    for id in ids {
        let name = model.store.name(id).to_string();
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        let shape = model.store.value(id).shape().to_vec();
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, model expects {shape:?}",
                entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + n * width;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} is truncated: tensor {name:?} needs bytes up to {end}, file has {}",
                path.display(),
                payload.len()
            )));
        }
        let bytes = &payload[entry.offset..end];
        let data: Vec<f64> = match dtype {
            DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        model.store.set(id, Tensor::new(&shape, data)?)?;
        expected_len += n * width;
    }
    if payload.len() != expected_len {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, manifest describes {expected_len}",
            path.display(),
            payload.len()
        )));
    }
    Ok(model)
}

/// Loads a checkpoint and refuses it unless it was saved for `expected`.
pub fn load_checkpoint_for(dir: &Path, expected: &VariantSpec) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    if manifest.spec.name != expected.name {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds variant {} but {} was requested",
            manifest.spec.name, expected.name
        )));
    }
    let model = load_checkpoint(dir)?;
    let mut a = model.spec.clone();
    let mut b = expected.clone();
    let same_vocab = a.vocab.as_ref().map(SubwordVocab::to_text) == b.vocab.as_ref().map(SubwordVocab::to_text);
    a.vocab = None;
    b.vocab = None;
    if a != b || !same_vocab {
        return Err(Error::Checkpoint(format!(
            "checkpoint configuration of variant {} differs from the requested one",
            expected.name
        )));
    }
    Ok(model)
}
