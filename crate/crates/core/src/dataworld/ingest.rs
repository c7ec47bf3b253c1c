//! Precomputed-feature ingestion: a JSON manifest describing videos and the
//! byte offsets of their per-step observation vectors in a raw f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Video};

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub dataset: String,
    pub feature_dim: usize,
    /// Blob filename, resolved relative to the manifest.
    pub blob: String,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: usize,
    pub task_id: usize,
    pub steps: Vec<ManifestStep>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestStep {
    pub class: usize,
    pub start_offset: u64,
    pub end_offset: u64,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob)
}

/// Writes `<manifest_path>` plus a sibling `.bin` blob holding every
/// observation vector as little-endian f32.
pub fn export_features(
    videos: &[Video],
    feature_dim: usize,
    dataset: &str,
    manifest_path: &Path,
) -> Result<(), DataError> {
    let blob_name = format!(
        "{}.bin",
        manifest_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "features".into())
    );
    let mut blob: Vec<u8> = Vec::new();
    let mut put = |v: &[f32]| -> Result<u64, DataError> {
        if v.len() != feature_dim {
            return Err(DataError::DimMismatch {
                expected: feature_dim,
                got: v.len(),
            });
        }
        let offset = blob.len() as u64;
        for &x in v {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        Ok(offset)
    };
    let mut manifest = FeatureManifest {
        dataset: dataset.to_string(),
        feature_dim,
        blob: blob_name.clone(),
        videos: Vec::with_capacity(videos.len()),
    };
    for v in videos {
        let mut steps = Vec::with_capacity(v.steps.len());
        for (i, &class) in v.steps.iter().enumerate() {
            let start_offset = put(&v.start_obs[i])?;
            let end_offset = put(&v.end_obs[i])?;
            steps.push(ManifestStep {
                class,
                start_offset,
                end_offset,
            });
        }
        manifest.videos.push(ManifestVideo {
            id: v.id,
            task_id: v.task,
            steps,
        });
    }
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob_path(manifest_path, &blob_name), &blob)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a manifest + blob pair back into videos. When `expected_dim` is
/// given, a differing manifest dim is an error up front.
pub fn ingest_features(
    manifest_path: &Path,
    expected_dim: Option<usize>,
) -> Result<Vec<Video>, DataError> {
    let manifest: FeatureManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if let Some(expected) = expected_dim {
        if manifest.feature_dim != expected {
            return Err(DataError::DimMismatch {
                expected,
                got: manifest.feature_dim,
            });
        }
    }
    let blob = fs::read(blob_path(manifest_path, &manifest.blob))?;
    let dim = manifest.feature_dim;
    let vec_len = (dim * 4) as u64;
    let read_vec = |video: usize, step: usize, offset: u64| -> Result<Vec<f32>, DataError> {
        let end = offset.checked_add(vec_len).ok_or(DataError::DanglingRef {
            video,
            step,
            offset,
            len: vec_len,
            blob_len: blob.len() as u64,
        })?;
        if end > blob.len() as u64 {
            return Err(DataError::DanglingRef {
                video,
                step,
                offset,
                len: vec_len,
                blob_len: blob.len() as u64,
            });
        }
        let bytes = &blob[offset as usize..end as usize];
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let mut steps = Vec::with_capacity(mv.steps.len());
        let mut start_obs = Vec::with_capacity(mv.steps.len());
        let mut end_obs = Vec::with_capacity(mv.steps.len());
        for (i, ms) in mv.steps.iter().enumerate() {
            steps.push(ms.class);
            start_obs.push(read_vec(mv.id, i, ms.start_offset)?);
            end_obs.push(read_vec(mv.id, i, ms.end_offset)?);
        }
        videos.push(Video {
            id: mv.id,
            task: mv.task_id,
            steps,
            start_obs,
            end_obs,
        });
    }
    Ok(videos)
}
