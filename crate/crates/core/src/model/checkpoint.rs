//! Checkpoint directories: one snapshot file per parameter plus a text
//! manifest carrying the model config and the name → file table.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::snapshot;

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
const CONFIG_PREFIX: &str = "config.";
const TENSOR_PREFIX: &str = "tensor.";

pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = KvFile::new();
    state.config().write_kv(&mut kv, CONFIG_PREFIX)?;
    for (name, tensor) in state.param_names().iter().zip(state.tensors()) {
        let file = format!("{name}.cftn");
        snapshot::save(tensor, &dir.join(&file))?;
        kv.set(&format!("{TENSOR_PREFIX}{name}"), &file)?;
    }
    let manifest = dir.join(CHECKPOINT_MANIFEST);
    let text = format!("# camforge checkpoint\n{}", kv.render());
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}

/// Parse a checkpoint manifest into its config and `(name, file)` table.
pub fn parse_manifest(text: &str) -> Result<(ModelConfig, Vec<(String, String)>)> {
    let kv = KvFile::parse(text)?;
    let config = ModelConfig::default().read_kv(&kv, CONFIG_PREFIX)?;
    config.validate()?;
    let files = kv
        .entries()
        .filter_map(|(k, v)| {
            k.strip_prefix(TENSOR_PREFIX)
                .map(|name| (name.to_string(), v.to_string()))
        })
        .collect();
    Ok((config, files))
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let manifest = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let (config, files) = parse_manifest(&text).map_err(|e| e.at(&manifest))?;
    let probe = ModelState::init(config.clone())?;
    let mut tensors = Vec::new();
    for name in probe.param_names() {
        let file = files
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::Corrupt {
                path: manifest.clone(),
                msg: format!("no entry for parameter {name}"),
            })?;
        if file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(Error::Corrupt {
                path: manifest.clone(),
                msg: format!("tensor file {file:?} must be a plain file name"),
            });
        }
        tensors.push(snapshot::load(&dir.join(file))?);
    }
    ModelState::from_tensors(config, tensors).map_err(|e| match e {
        Error::Config(msg) => Error::Corrupt {
            path: dir.to_path_buf(),
            msg,
        },
        other => other,
    })
}
