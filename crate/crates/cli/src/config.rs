//! Run configuration: one structured file (TOML, JSON accepted) with
//! overridable dotted keys and a content hash embedded in every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use schema_core::dataworld::WorldSpec;
use schema_core::inference::PlanMode;
use schema_core::planner::ModelConfig;
use schema_core::tensor::AdamConfig;
use schema_core::training::{LossWeights, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: initialization, splits, batch order, plan sampling.
    pub seed: u64,
    pub world: WorldSpec,
    /// Architecture knobs. Shape fields (feature_dim, num_classes, num_tasks,
    /// k) are always derived from the data artifacts at run time.
    pub model: ModelConfig,
    pub train: TrainSection,
    pub corpus: CorpusSection,
    pub run: RunSection,
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weights: WeightsSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            epochs: 120,
            batch_size: 256,
            lr: adam.lr,
            decay_factor: adam.decay_factor,
            decay_every: adam.decay_every,
            weights: WeightsSection::default(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64, checkpoint: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                decay_factor: self.decay_factor,
                decay_every: self.decay_every,
                ..AdamConfig::default()
            },
            seed,
            weights: LossWeights {
                align: self.weights.align,
                state: self.weights.state,
                step: self.weights.step,
                task: self.weights.task,
            },
            checkpoint,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub align: f64,
    pub state: f64,
    pub step: f64,
    pub task: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection {
            align: 1.0,
            state: 1.0,
            step: 1.0,
            task: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// "mock" (offline, deterministic) or "http".
    pub backend: String,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u64>,
    pub api_key_env: Option<String>,
    /// Falls back to $SCHEMA_CACHE_DIR when unset.
    pub cache_dir: Option<String>,
    /// "none" keeps existing description features; "bow" re-embeds the
    /// corpus text with a hashed bag-of-words of `bow_dim`.
    pub feature: String,
    pub bow_dim: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            backend: "mock".into(),
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 60,
            max_retries: 2,
            temperature: None,
            max_tokens: None,
            api_key_env: None,
            cache_dir: None,
            feature: "none".into(),
            bow_dim: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: String,
    /// Planning horizon (3..=6).
    pub t: usize,
    pub mode: PlanMode,
    pub split_ratio: f64,
    /// Draws per context for `plan --mode prob`.
    pub samples: usize,
    /// Query noise scale for probabilistic sampling.
    pub sigma: f64,
    /// Checkpoint file (relative to the output directory) that `eval`,
    /// `plan`, and `stepcls` load.
    pub checkpoint: String,
    /// Extra horizons for `eval`; empty means just `t`.
    pub eval_horizons: Vec<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: "out".into(),
            t: 3,
            mode: PlanMode::Argmax,
            split_ratio: 0.7,
            samples: 100,
            sigma: 1.0,
            checkpoint: "model.json".into(),
            eval_horizons: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// One of "losses", "decoders", "memory", "decoding".
    pub axis: String,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            axis: "losses".into(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn horizon_ok(t: usize) -> bool {
    (3..=6).contains(&t)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !horizon_ok(self.run.t) {
            return Err(CliError::Config(format!(
                "run.t: must be in 3..=6, got {}",
                self.run.t
            )));
        }
        for &t in &self.run.eval_horizons {
            if !horizon_ok(t) {
                return Err(CliError::Config(format!(
                    "run.eval_horizons: must be in 3..=6, got {t}"
                )));
            }
        }
        if !(self.run.split_ratio > 0.0 && self.run.split_ratio < 1.0) {
            return Err(CliError::Config(format!(
                "run.split_ratio: must be in (0, 1), got {}",
                self.run.split_ratio
            )));
        }
        if self.run.samples == 0 {
            return Err(CliError::Config("run.samples: must be positive".into()));
        }
        if !matches!(self.corpus.backend.as_str(), "mock" | "http") {
            return Err(CliError::Config(format!(
                "corpus.backend: expected \"mock\" or \"http\", got {:?}",
                self.corpus.backend
            )));
        }
        if !matches!(self.corpus.feature.as_str(), "none" | "bow") {
            return Err(CliError::Config(format!(
                "corpus.feature: expected \"none\" or \"bow\", got {:?}",
                self.corpus.feature
            )));
        }
        if self.corpus.feature == "bow" && self.corpus.bow_dim == 0 {
            return Err(CliError::Config(
                "corpus.bow_dim: must be positive for feature \"bow\"".into(),
            ));
        }
        if !matches!(
            self.ablate.axis.as_str(),
            "losses" | "decoders" | "memory" | "decoding"
        ) {
            return Err(CliError::Config(format!(
                "ablate.axis: expected one of losses/decoders/memory/decoding, got {:?}",
                self.ablate.axis
            )));
        }
        if self.ablate.seeds.is_empty() {
            return Err(CliError::Config("ablate.seeds: must not be empty".into()));
        }
        self.world
            .validate()
            .map_err(|e| CliError::Config(format!("world: {e}")))?;
        // Shape fields come from the data; validate the knobs that survive.
        if self.model.decoder.embed_dim % self.model.decoder.heads != 0 {
            return Err(CliError::Config(format!(
                "model.decoder: embed_dim {} not divisible by heads {}",
                self.model.decoder.embed_dim, self.model.decoder.heads
            )));
        }
        if !(0.0..1.0).contains(&self.model.decoder.dropout) {
            return Err(CliError::Config(format!(
                "model.decoder.dropout: must be in [0, 1), got {}",
                self.model.decoder.dropout
            )));
        }
        Ok(())
    }

    /// Content hash over everything except the output directory, so moving a
    /// run does not change its identity.
    pub fn hash(&self) -> String {
        let mut for_hash = self.clone();
        for_hash.run.out_dir = String::new();
        let text = serde_json::to_string(&for_hash).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// `key.path=value`: walks/creates JSON objects along the dotted path and
/// sets the leaf. Values parse as JSON when possible, else as strings, so
/// `train.lr=1e-3`, `run.mode=viterbi`, and `ablate.seeds=[1,2]` all work.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override {spec:?}: expected key.path=value"))
    })?;
    if path.is_empty() {
        return Err(CliError::Config(format!("override {spec:?}: empty key")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override {spec:?}: {} is not a table",
                segments[..i].join(".")
            ))
        })?;
        if i + 1 == segments.len() {
            map.insert((*seg).to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry((*seg).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("loop returns on the last segment")
}

/// Loads, overrides, validates. A missing `--config` means all defaults; a
/// missing file is an I/O error. `.json` files parse as JSON, anything else
/// as TOML.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut value = match path {
        None => serde_json::json!({}),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("config {}: {e}", p.display())))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            } else {
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(table)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        }
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    // Deserialize through a path tracker so a bad key reports its full
    // dotted location (e.g. "train.lrate: unknown field ...").
    let config: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}
