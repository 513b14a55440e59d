//! Parameter containers: `"FDNC"`, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name and a tensor snapshot. The model config
//! and init seed live in a JSON sidecar next to the container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_snapshot_from, write_snapshot_to, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDNC";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    init_seed: u64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_params<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_snapshot_to(t, &mut buf)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_params<T: Real>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let bytes = fs::read(path)?;
    let mut input = bytes.as_slice();
    let take = |input: &mut &[u8], n: usize| -> Result<Vec<u8>> {
        if input.len() < n {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let (head, rest) = input.split_at(n);
        *input = rest;
        Ok(head.to_vec())
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    if take(&mut input, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = u32_at(take(&mut input, 4)?);
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(&mut input, 4)?);
        let name = String::from_utf8(take(&mut input, len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
        names.push(name);
        tensors.push(read_snapshot_from(&mut input)?);
    }
    if !input.is_empty() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes", input.len()),
        ));
    }
    ParamStore::from_parts(names, tensors)
}

/// Writes the parameter container at `path` and the config at `path.json`.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_params(&model.params, path)?;
    let sidecar = Sidecar {
        config: model.config.clone(),
        init_seed: model.init_seed,
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let model = build_model(&sidecar.config, sidecar.init_seed)?;
    model.with_params(&read_params(path)?)
}
