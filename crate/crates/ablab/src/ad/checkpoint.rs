//! Checkpoints: one blob-container file of f32 tensors plus a JSON index
//! mapping namespaced parameter names to byte offsets.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::blob::{blob_len, read_blob, write_blob, BlobError, BlobTensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint index: {0}")]
    BadIndex(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: u64,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    entries: Vec<IndexEntry>,
    meta: serde_json::Value,
}

/// Write named tensor groups to `<dir>/tensors.bin` + `<dir>/index.json`.
/// Entry names are `<namespace>.<param name>`.
pub fn save_checkpoint(
    dir: &Path,
    groups: &[(&str, &ParamStore)],
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut w = BufWriter::new(File::create(dir.join("tensors.bin"))?);
    let mut offset = 0u64;
    for (ns, store) in groups {
        for (name, t) in store.iter() {
            let bt = BlobTensor::F32 { dims: t.shape.clone(), data: t.data.clone() };
            write_blob(&mut w, &bt)?;
            entries.push(IndexEntry {
                name: format!("{ns}.{name}"),
                offset,
                dims: t.shape.clone(),
            });
            offset += blob_len(&bt) as u64;
        }
    }
    let index = Index { version: 1, entries, meta };
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(())
}

/// Read all entries of one namespace back into a ParamStore in index order.
pub fn load_namespace(dir: &Path, ns: &str) -> Result<ParamStore, CheckpointError> {
    let index: Index = serde_json::from_str(
        &std::fs::read_to_string(dir.join("index.json"))
            .map_err(|e| CheckpointError::BadIndex(format!("missing index.json: {e}")))?,
    )
    .map_err(|e| CheckpointError::BadIndex(e.to_string()))?;
    let mut f = BufReader::new(File::open(dir.join("tensors.bin"))?);
    let prefix = format!("{ns}.");
    let mut store = ParamStore::new();
    for entry in index.entries.iter().filter(|e| e.name.starts_with(&prefix)) {
        f.seek(SeekFrom::Start(entry.offset))?;
        let bt = read_blob(&mut f)?;
        if bt.dims() != entry.dims.as_slice() {
            return Err(CheckpointError::BadIndex(format!(
                "dims for {} disagree between index and blob",
                entry.name
            )));
        }
        let data = bt.as_f32()?.to_vec();
        store.insert(&entry.name[prefix.len()..], Tensor::from_vec(entry.dims.clone(), data));
    }
    Ok(store)
}

pub fn load_meta(dir: &Path) -> Result<serde_json::Value, CheckpointError> {
    let index: Index = serde_json::from_str(
        &std::fs::read_to_string(dir.join("index.json"))
            .map_err(|e| CheckpointError::BadIndex(format!("missing index.json: {e}")))?,
    )
    .map_err(|e| CheckpointError::BadIndex(e.to_string()))?;
    Ok(index.meta)
}

impl From<serde_json::Error> for CheckpointError {
    fn from(e: serde_json::Error) -> Self {
        CheckpointError::BadIndex(e.to_string())
    }
}
