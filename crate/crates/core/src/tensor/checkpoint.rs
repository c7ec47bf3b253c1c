//! Checkpoints: a JSON manifest describing parameter names/shapes/offsets,
//! next to a raw little-endian f32 blob with the values.

use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    /// Free-form run metadata (config hash, epoch, metrics...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("blob length {got} bytes does not match manifest ({want})")]
    BlobLength { got: usize, want: usize },
}

fn blob_path(manifest: &Path, meta_blob: &str) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(meta_blob)
}

/// Writes `<path>` (JSON manifest) and a sibling `.bin` blob.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    extra: serde_json::Value,
) -> Result<(), CheckpointError> {
    let blob_name = {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".to_string());
        format!("{stem}.bin")
    };
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for id in store.ids() {
        let (rows, cols) = store.shape(id);
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            rows,
            cols,
            offset: blob.len() as u64,
        });
        for &v in store.value(id) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        version: 1,
        blob: blob_name.clone(),
        params,
        extra,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(blob_path(path, &blob_name))?;
    f.write_all(&blob)?;
    fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a manifest + blob pair written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, CheckpointMeta), CheckpointError> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(path)?)?;
    if meta.version != 1 {
        return Err(CheckpointError::Version(meta.version));
    }
    let mut blob = Vec::new();
    fs::File::open(blob_path(path, &meta.blob))?.read_to_end(&mut blob)?;
    let want: usize = meta.params.iter().map(|p| p.rows * p.cols * 4).sum();
    if blob.len() != want {
        return Err(CheckpointError::BlobLength {
            got: blob.len(),
            want,
        });
    }
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for entry in &meta.params {
        let id = store.add(&entry.name, entry.rows, entry.cols, Init::Zeros, &mut rng);
        let dst = store.value_mut(id);
        let base = entry.offset as usize;
        for (i, v) in dst.iter_mut().enumerate() {
            let o = base + i * 4;
            *v = f32::from_le_bytes([blob[o], blob[o + 1], blob[o + 2], blob[o + 3]]);
        }
    }
    Ok((store, meta))
}
