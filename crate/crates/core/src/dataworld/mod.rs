//! Synthetic procedural worlds and the dataset plumbing around them:
//! generation, sliding-window extraction, per-task video splits, batching,
//! and ingestion of externally precomputed features.
//!
//! A world is a set of tasks; each task is a chain of step classes acting on
//! latent state vectors. The after-state of one step is exactly the
//! before-state of the next, so state structure is learnable by construction.
//! A task can carry an alternative valid ordering (two adjacent steps
//! swapped); that forces the three surrounding states to collapse to one
//! vector, which makes both orderings genuinely indistinguishable from the
//! observations — the multi-modal ground truth used by the mode metrics.

mod ingest;
mod world;

#[cfg(test)]
mod tests;

pub use ingest::{export_features, ingest_features, FeatureManifest, ManifestStep, ManifestVideo};
pub use world::{generate_world, ModeContext, SyntheticWorld, Video, WorldSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid world spec: {field}: {detail}")]
    InvalidSpec {
        field: &'static str,
        detail: String,
    },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("feature dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("video {video} step {step}: blob offset {offset} + {len} bytes exceeds blob size {blob_len}")]
    DanglingRef {
        video: usize,
        step: usize,
        offset: u64,
        len: u64,
        blob_len: u64,
    },
    #[error("horizon must be at least 1, got {0}")]
    BadHorizon(usize),
    #[error("empty dataset")]
    Empty,
}

/// One procedure-planning sample: observed start/goal features and the step
/// labels between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureSample {
    pub video_id: usize,
    pub task: usize,
    /// Window offset within the source video (first step index).
    pub offset: usize,
    pub steps: Vec<usize>,
    pub s0: Vec<f32>,
    pub st: Vec<f32>,
}

/// Samples plus the world-level shape facts training needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_tasks: usize,
    pub samples: Vec<ProcedureSample>,
}

/// All length-`t` sliding windows of every video. A video shorter than `t`
/// contributes nothing. `t == 1` yields the single-step samples used by the
/// state-based step classification protocol.
pub fn extract_procedures(videos: &[Video], t: usize) -> Result<Vec<ProcedureSample>, DataError> {
    if t == 0 {
        return Err(DataError::BadHorizon(t));
    }
    let mut out = Vec::new();
    for v in videos {
        if v.steps.len() < t {
            continue;
        }
        for o in 0..=v.steps.len() - t {
            out.push(ProcedureSample {
                video_id: v.id,
                task: v.task,
                offset: o,
                steps: v.steps[o..o + t].to_vec(),
                s0: v.start_obs[o].clone(),
                st: v.end_obs[o + t - 1].clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Split {
    pub train: Vec<ProcedureSample>,
    pub test: Vec<ProcedureSample>,
    /// Tasks that could not be split (fewer than 2 videos).
    pub warnings: Vec<String>,
}

/// Splits by video, stratified per task: about `ratio` of each task's videos
/// (and all their windows) go to train. Deterministic in `seed`.
pub fn split_train_test(samples: &[ProcedureSample], ratio: f64, seed: u64) -> Split {
    use std::collections::{BTreeMap, BTreeSet};
    let mut task_videos: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for s in samples {
        task_videos.entry(s.task).or_default().insert(s.video_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_videos: BTreeSet<usize> = BTreeSet::new();
    let mut warnings = Vec::new();
    for (task, vids) in &task_videos {
        let mut vids: Vec<usize> = vids.iter().copied().collect();
        if vids.len() < 2 {
            warnings.push(format!(
                "task {task} has {} video(s); keeping all in train",
                vids.len()
            ));
            train_videos.extend(vids);
            continue;
        }
        vids.shuffle(&mut rng);
        let n = vids.len();
        let take = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        train_videos.extend(&vids[..take]);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in samples {
        if train_videos.contains(&s.video_id) {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Split {
        train,
        test,
        warnings,
    }
}

/// Index batches for one epoch: a seeded shuffle of `0..n` chunked by
/// `batch_size`, final partial batch included. The same (seed, epoch) always
/// produces the same batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
