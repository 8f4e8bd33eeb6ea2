//! Checkpoints: a `.bin` file of concatenated f64 tensors in the flat tensor
//! format and a `.json` manifest with the model config and the byte offset
//! of every named parameter or buffer.

use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::ParamKind;
use crate::error::{MasfError, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{encoded_len, read_tensor, write_tensor, DType};

pub const CHECKPOINT_FORMAT: &str = "masf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Free-form training context stored with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    /// "learnable" or "buffer".
    kind: String,
    offset: u64,
    shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    model: ModelConfig,
    /// Tensor file, relative to the manifest.
    data: PathBuf,
    entries: Vec<Entry>,
    meta: CheckpointMeta,
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `<path>.json` and `<path>.bin`; `path` may carry either
/// extension or none. Returns the manifest path.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<PathBuf> {
    let json = manifest_path(path);
    let bin = path.with_extension("bin");
    let mut out = BufWriter::new(std::fs::File::create(&bin)?);
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for e in model.store.entries() {
        write_tensor(&mut out, &e.value, DType::F64)?;
        entries.push(Entry {
            name: e.name.clone(),
            kind: match e.kind {
                ParamKind::Learnable => "learnable",
                ParamKind::Buffer => "buffer",
            }
            .into(),
            offset,
            shape: e.value.shape().dims(),
        });
        offset += encoded_len(e.value.shape(), DType::F64) as u64;
    }
    out.flush()?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        data: PathBuf::from(bin.file_name().expect("checkpoint file name")),
        entries,
        meta: meta.clone(),
    };
    std::fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(json)
}

/// Rebuilds the model from the stored config and overwrites every
/// parameter and buffer with the stored values.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let json = manifest_path(path);
    let text = match std::fs::read_to_string(&json) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(MasfError::MissingFile(json)),
        Err(e) => return Err(e.into()),
    };
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| MasfError::Data(format!("{}: {e}", json.display())))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(MasfError::Data(format!(
            "{}: unsupported checkpoint {} v{}",
            json.display(),
            m.format,
            m.version
        )));
    }
    let mut model = Model::new(m.model.clone(), 0)?;
    if m.entries.len() != model.store.len() {
        return Err(MasfError::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            m.entries.len(),
            model.store.len()
        )));
    }
    let bin = json.parent().unwrap_or(Path::new(".")).join(&m.data);
    let file = std::fs::File::open(&bin).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MasfError::MissingFile(bin.clone()),
        _ => e.into(),
    })?;
    let mut input = BufReader::new(file);
    let mut pos = 0u64;
    for e in &m.entries {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| MasfError::Data(format!("checkpoint tensor `{}` is not in the model", e.name)))?;
        if pos != e.offset {
            input.seek(SeekFrom::Start(e.offset))?;
        }
        let t = read_tensor(&mut input)?;
        pos = e.offset + encoded_len(t.shape(), DType::F64) as u64;
        let slot = model.store.get_mut(id);
        if t.shape() != slot.shape() || t.shape().dims() != e.shape {
            return Err(MasfError::Data(format!(
                "checkpoint tensor `{}` has shape {}, model expects {}",
                e.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok((model, m.meta))
}
