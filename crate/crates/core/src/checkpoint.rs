//! Model checkpoints: a TOML manifest (backbone config and parameter list) plus one tensor
//! blob per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::blob::{self, Precision};

pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    blob: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    precision: Precision,
    backbone: BackboneConfig,
    params: Vec<ParamEntry>,
}

/// Write `model` into `dir`, returning the manifest path.
pub fn save(model: &Model, dir: &Path, precision: Precision) -> Result<PathBuf> {
    let blobs = dir.join("params");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        let file = PathBuf::from("params").join(format!("{i:03}_{}.bin", p.name.replace('.', "_")));
        blob::write(&dir.join(&file), &p.value, precision)?;
        params.push(ParamEntry { name: p.name.clone(), kind: p.kind, shape: p.value.shape().to_vec(), blob: file });
    }
    let manifest = Manifest { format: FORMAT, precision, backbone: model.config.clone(), params };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a checkpoint from its directory or manifest path. The parameter list must match
/// the layout the backbone config implies.
pub fn load(path: &Path) -> Result<Model> {
    let manifest_path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Load(format!("{}: unsupported checkpoint format {}", manifest_path.display(), manifest.format)));
    }
    let mut model = Model::init(manifest.backbone, 0)?;
    if model.params.len() != manifest.params.len() {
        return Err(Error::Load(format!(
            "{}: {} parameters listed, the backbone has {}",
            manifest_path.display(),
            manifest.params.len(),
            model.params.len()
        )));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    for (entry, slot) in manifest.params.iter().zip(model.params.iter_mut()) {
        if entry.name != slot.name || entry.kind != slot.kind || entry.shape != slot.value.shape() {
            return Err(Error::Load(format!(
                "{}: parameter {} ({:?}, {:?}) does not match the backbone's {} ({:?}, {:?})",
                manifest_path.display(),
                entry.name,
                entry.kind,
                entry.shape,
                slot.name,
                slot.kind,
                slot.value.shape()
            )));
        }
        let value = blob::read(&root.join(&entry.blob))?;
        if value.shape() != entry.shape.as_slice() {
            return Err(Error::Load(format!("{}: blob shape {:?} for {}", entry.blob.display(), value.shape(), entry.name)));
        }
        slot.value = value;
    }
    Ok(model)
}
