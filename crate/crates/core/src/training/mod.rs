//! The three-loss training loop: start/goal alignment, mid-state regression
//! against description-derived targets, and per-position step classification,
//! plus the task-classifier term when that feature is on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{DescriptionFeatures, StateSide};
use crate::dataworld::{epoch_batches, ProcedureSample};
use crate::encoders::{class_sims, EncodedMemory};
use crate::inference::{plan_batch, InferenceError, PlanMode, TransitionModel};
use crate::metrics::{sequence_metrics, stepcls_zero_shot, HorizonRow, MetricsError};
use crate::planner::{MemorySource, ModelConfig, PlannerModel};
use crate::tensor::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, CheckpointError, CheckpointMeta,
    Graph, ParamStore, Real, TensorError, TensorId,
};


#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("sample {index}: {detail}")]
    BadSample { index: usize, detail: String },
    #[error("non-finite loss at epoch {epoch} batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("epoch {epoch} batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
    #[error("checkpoint extra: {0}")]
    BadCheckpointExtra(String),
    #[error("checkpoint param {name}: {detail}")]
    ParamMismatch { name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Start-state and goal-state alignment (the contrastive encoder loss):
/// cross-entropy over K-summed class similarities, start against the
/// before-rows of the first step and goal against the after-rows of the last.
pub fn loss_state_alignment<E: Real>(
    g: &mut Graph<E>,
    s0_enc: TensorId,
    st_enc: TensorId,
    state_memory: TensorId,
    c: usize,
    k: usize,
    first_labels: &[usize],
    last_labels: &[usize],
) -> Result<TensorId, TensorError> {
    let sims0 = class_sims(g, s0_enc, state_memory, c, k, StateSide::Before)?;
    let simst = class_sims(g, st_enc, state_memory, c, k, StateSide::After)?;
    let l0 = g.cross_entropy_mean(sims0, first_labels)?;
    let lt = g.cross_entropy_mean(simst, last_labels)?;
    g.add(l0, lt)
}

/// Regression targets for the imputed mid-states: the K-averaged after-rows
/// of step t pooled with the before-rows of step t+1, detached so the
/// targets do not pull on the description encoder.
pub fn midstate_targets<E: Real>(
    g: &mut Graph<E>,
    state_memory: TensorId,
    steps: &[Vec<usize>],
    c: usize,
    k: usize,
) -> Result<TensorId, TensorError> {
    let t = steps.first().map(|s| s.len()).unwrap_or(0);
    if t < 2 || steps.iter().any(|s| s.len() != t) {
        return Err(TensorError::BadArgument {
            op: "midstate_targets",
            detail: "need equal-length step sequences with at least 2 steps".into(),
        });
    }
    let batch = steps.len();
    let rows = 2 * c * k;
    let w = E::from_f64(1.0 / (2 * k) as f64);
    // (B·(t−1), 2CK) selector averaging the relevant description rows.
    let mut sel = vec![E::ZERO; batch * (t - 1) * rows];
    for (b, seq) in steps.iter().enumerate() {
        for pos in 0..t - 1 {
            let row = &mut sel[(b * (t - 1) + pos) * rows..(b * (t - 1) + pos + 1) * rows];
            for j in 0..k {
                row[c * k + seq[pos] * k + j] += w; // after(a_pos)
                row[seq[pos + 1] * k + j] += w; // before(a_pos+1)
            }
        }
    }
    let sel = g.input(&sel, batch * (t - 1), rows)?;
    let targets = g.matmul(sel, state_memory)?;
    g.detach(targets)
}

/// Per-slot step cross-entropy over logits laid out (batch·t, C), labels
/// flattened the same way.
pub fn loss_step<E: Real>(
    g: &mut Graph<E>,
    step_logits: TensorId,
    labels: &[usize],
) -> Result<TensorId, TensorError> {
    g.cross_entropy_mean(step_logits, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub align: f64,
    pub state: f64,
    pub step: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            align: 1.0,
            state: 1.0,
            step: 1.0,
            task: 1.0,
        }
    }
}

/// The loss terms of one forward pass, plus their weighted total.
#[derive(Debug)]
pub struct LossBundle {
    pub align: TensorId,
    pub state: TensorId,
    pub step: TensorId,
    pub task: Option<TensorId>,
    pub total: TensorId,
}

/// Assembles all losses from a forward pass. `steps` are the ground-truth
/// step labels per sample; `tasks` must be given when the task feature is on.
pub fn compute_losses<E: Real>(
    g: &mut Graph<E>,
    pass: &crate::planner::ForwardPass,
    config: &ModelConfig,
    steps: &[Vec<usize>],
    tasks: Option<&[usize]>,
    weights: &LossWeights,
) -> Result<LossBundle, TensorError> {
    let c = config.num_classes;
    let k = config.k;
    let first: Vec<usize> = steps.iter().map(|s| s[0]).collect();
    let last: Vec<usize> = steps.iter().map(|s| *s.last().unwrap()).collect();
    // Alignment and mid-state targets always use the canonical state
    // description memory; the memory-source ablation only redirects the
    // decoders' cross-attention.
    let align = loss_state_alignment(
        g,
        pass.s0_enc,
        pass.st_enc,
        pass.state_memory,
        c,
        k,
        &first,
        &last,
    )?;
    let targets = midstate_targets(g, pass.state_memory, steps, c, k)?;
    let state = g.mse_mean(pass.mid_states, targets)?;
    let flat: Vec<usize> = steps.iter().flatten().copied().collect();
    let step = loss_step(g, pass.step_logits, &flat)?;

    let mut total = g.scale(align, weights.align)?;
    let ws = g.scale(state, weights.state)?;
    total = g.add(total, ws)?;
    let wp = g.scale(step, weights.step)?;
    total = g.add(total, wp)?;

    let task = match (pass.task_logits, tasks) {
        (Some(logits), Some(labels)) => {
            let l = g.cross_entropy_mean(logits, labels)?;
            let wt = g.scale(l, weights.task)?;
            total = g.add(total, wt)?;
            Some(l)
        }
        (Some(_), None) => {
            return Err(TensorError::BadArgument {
                op: "compute_losses",
                detail: "task feature is on but no task labels were given".into(),
            })
        }
        _ => None,
    };

    Ok(LossBundle {
        align,
        state,
        step,
        task,
        total,
    })
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Where to keep the best-test-SR model, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            checkpoint: None,
        }
    }
}

/// One epoch's log line: mean losses over the epoch's batches, the learning
/// rate in effect, and argmax-decoded test metrics (NaN when no test set).
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_align: f64,
    pub l_state: f64,
    pub l_step: f64,
    pub l_task: f64,
    pub lr: f64,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
}

impl EpochStats {
    pub fn csv_header() -> &'static str {
        "epoch,l_align,l_state,l_step,l_task,lr,sr,macc,miou"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}",
            self.epoch,
            self.l_align,
            self.l_state,
            self.l_step,
            self.l_task,
            self.lr,
            self.sr,
            self.macc,
            self.miou
        )
    }
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_sr: f64,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EpochStats::csv_header());
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.to_csv());
            out.push('\n');
        }
        out
    }
}

fn check_samples(
    samples: &[ProcedureSample],
    config: &ModelConfig,
    what: &str,
) -> Result<(), TrainError> {
    for (i, s) in samples.iter().enumerate() {
        let t = s.steps.len();
        if t < 2 || t > config.max_horizon {
            return Err(TrainError::BadSample {
                index: i,
                detail: format!("{what} horizon {t} outside 2..={}", config.max_horizon),
            });
        }
        if let Some(&l) = s.steps.iter().find(|&&l| l >= config.num_classes) {
            return Err(TrainError::BadSample {
                index: i,
                detail: format!("{what} label {l} >= num_classes {}", config.num_classes),
            });
        }
        if s.s0.len() != config.feature_dim || s.st.len() != config.feature_dim {
            return Err(TrainError::BadSample {
                index: i,
                detail: format!(
                    "{what} feature dims ({}, {}) != {}",
                    s.s0.len(),
                    s.st.len(),
                    config.feature_dim
                ),
            });
        }
        if config.use_task_feature && s.task >= config.num_tasks {
            return Err(TrainError::BadSample {
                index: i,
                detail: format!("{what} task {} >= num_tasks {}", s.task, config.num_tasks),
            });
        }
    }
    Ok(())
}

/// Transition statistics from the training windows' label sequences.
pub fn transition_from_samples(
    samples: &[ProcedureSample],
    c: usize,
) -> Result<TransitionModel, InferenceError> {
    let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.steps.clone()).collect();
    TransitionModel::from_labels(&seqs, c)
}

/// Plans every sample, grouped by horizon. Returns per-horizon
/// (t, predictions, ground truths), ascending in t.
fn grouped_plans(
    store: &ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    samples: &[ProcedureSample],
    mode: PlanMode,
    transition: Option<&TransitionModel>,
) -> Result<Vec<(usize, Vec<Vec<usize>>, Vec<Vec<usize>>)>, TrainError> {
    let mut groups: BTreeMap<usize, Vec<&ProcedureSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.steps.len()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (t, group) in groups {
        let owned: Vec<ProcedureSample> = group.iter().map(|&s| s.clone()).collect();
        let plans = plan_batch(store, model, feats, &owned, mode, transition)?;
        let preds: Vec<Vec<usize>> = plans.into_iter().map(|p| p.steps).collect();
        let gts: Vec<Vec<usize>> = owned.into_iter().map(|s| s.steps).collect();
        out.push((t, preds, gts));
    }
    Ok(out)
}

/// Per-horizon SR / mAcc / mIoU rows over a held-out set.
pub fn evaluate(
    store: &ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    samples: &[ProcedureSample],
    mode: PlanMode,
    transition: Option<&TransitionModel>,
) -> Result<Vec<HorizonRow>, TrainError> {
    let mut rows = Vec::new();
    for (t, preds, gts) in grouped_plans(store, model, feats, samples, mode, transition)? {
        let (sr, macc, miou) = sequence_metrics(&preds, &gts)?;
        rows.push(HorizonRow {
            t,
            sr,
            macc,
            miou,
            samples: preds.len(),
        });
    }
    Ok(rows)
}

fn pooled_metrics(
    store: &ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    samples: &[ProcedureSample],
) -> Result<(f64, f64, f64), TrainError> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (_, p, g) in grouped_plans(store, model, feats, samples, PlanMode::Argmax, None)? {
        preds.extend(p);
        gts.extend(g);
    }
    Ok(sequence_metrics(&preds, &gts)?)
}

/// The zero-shot step classification protocol: encode single-step start/end
/// observations, score them against the encoded description memory, take the
/// best K-summed before+after similarity. Returns accuracy in percent.
pub fn stepcls_eval(
    store: &ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    samples: &[ProcedureSample],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Metrics(MetricsError::Empty {
            what: "step classification batch",
        }));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.steps.len() != 1 {
            return Err(TrainError::BadSample {
                index: i,
                detail: format!("step classification wants t=1, got {}", s.steps.len()),
            });
        }
    }
    let mut g: Graph<f32> = Graph::new();
    let bind = store.bind(&mut g)?;
    let fdim = model.config.feature_dim;
    let b = samples.len();
    let mut s0 = Vec::with_capacity(b * fdim);
    let mut st = Vec::with_capacity(b * fdim);
    for s in samples {
        s0.extend_from_slice(&s.s0);
        st.extend_from_slice(&s.st);
    }
    let s0 = g.input(&s0, b, fdim)?;
    let st = g.input(&st, b, fdim)?;
    let s0_enc = model.state_encoder.encode(&mut g, &bind, s0)?;
    let st_enc = model.state_encoder.encode(&mut g, &bind, st)?;
    let mem = model.desc_encoder.encode_memory(&mut g, &bind, feats)?;
    let memory = EncodedMemory::from_graph(&g, mem, model.config.num_classes, model.config.k)
        .map_err(MetricsError::from)?;
    let e = model.config.decoder.embed_dim;
    let rows = |tid| -> Vec<Vec<f32>> {
        let v = g.value(tid);
        (0..b).map(|i| v[i * e..(i + 1) * e].to_vec()).collect()
    };
    let labels: Vec<usize> = samples.iter().map(|s| s.steps[0]).collect();
    Ok(stepcls_zero_shot(
        &rows(s0_enc),
        &rows(st_enc),
        &labels,
        &memory,
    )?)
}

/// Saves the model parameters plus everything needed to rebuild it: the
/// model config and (for the random-memory ablation) the fixed memory rows.
pub fn save_model(
    path: &Path,
    store: &ParamStore<f32>,
    model: &PlannerModel,
    mut extra: serde_json::Value,
) -> Result<(), TrainError> {
    if !extra.is_object() {
        extra = serde_json::json!({});
    }
    let obj = extra.as_object_mut().unwrap();
    obj.insert(
        "model_config".into(),
        serde_json::to_value(&model.config).expect("config serializes"),
    );
    if let Some(rows) = model.random_memory() {
        obj.insert(
            "random_memory".into(),
            serde_json::to_value(rows).expect("rows serialize"),
        );
    }
    save_checkpoint(path, store, extra)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint written by [`save_model`], strictly:
/// every parameter must exist on both sides with matching shape.
pub fn load_model(
    path: &Path,
) -> Result<(ParamStore<f32>, PlannerModel, CheckpointMeta), TrainError> {
    let (loaded, meta) = load_checkpoint(path)?;
    let config: ModelConfig = serde_json::from_value(
        meta.extra
            .get("model_config")
            .cloned()
            .ok_or_else(|| TrainError::BadCheckpointExtra("missing model_config".into()))?,
    )
    .map_err(|e| TrainError::BadCheckpointExtra(format!("model_config: {e}")))?;

    let mut store = ParamStore::<f32>::new();
    // The RNG only shapes throwaway init values; every param is overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = PlannerModel::new(&mut store, &mut rng, config)?;
    if model.config.memory_source == MemorySource::Random {
        let rows: Vec<f32> = serde_json::from_value(
            meta.extra
                .get("random_memory")
                .cloned()
                .ok_or_else(|| TrainError::BadCheckpointExtra("missing random_memory".into()))?,
        )
        .map_err(|e| TrainError::BadCheckpointExtra(format!("random_memory: {e}")))?;
        model.set_random_memory(rows)?;
    }

    if loaded.len() != store.len() {
        return Err(TrainError::BadCheckpointExtra(format!(
            "checkpoint has {} params, model wants {}",
            loaded.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let src = loaded
            .lookup(&name)
            .ok_or_else(|| TrainError::ParamMismatch {
                name: name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
        if loaded.shape(src) != store.shape(id) {
            return Err(TrainError::ParamMismatch {
                name,
                detail: format!(
                    "shape {:?} in checkpoint, model wants {:?}",
                    loaded.shape(src),
                    store.shape(id)
                ),
            });
        }
        store.value_mut(id).copy_from_slice(loaded.value(src));
    }
    Ok((store, model, meta))
}

/// One optimization step's forward/backward: returns the unweighted loss
/// values (align, state, step, task) and leaves fresh gradients in `store`.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    store: &mut ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    train: &[ProcedureSample],
    idxs: &[usize],
    t: usize,
    graph_seed: u64,
    weights: &LossWeights,
) -> Result<[f64; 4], TensorError> {
    let b = idxs.len();
    let fdim = model.config.feature_dim;
    let mut g: Graph<f32> = Graph::with_seed(graph_seed);
    g.set_training(true);
    let bind = store.bind(&mut g)?;
    let mut s0 = Vec::with_capacity(b * fdim);
    let mut st = Vec::with_capacity(b * fdim);
    let mut steps = Vec::with_capacity(b);
    let mut tasks = Vec::with_capacity(b);
    for &i in idxs {
        s0.extend_from_slice(&train[i].s0);
        st.extend_from_slice(&train[i].st);
        steps.push(train[i].steps.clone());
        tasks.push(train[i].task);
    }
    let s0 = g.input(&s0, b, fdim)?;
    let st = g.input(&st, b, fdim)?;
    let true_tasks = model.config.use_task_feature.then_some(&tasks[..]);
    let pass = model.forward(&mut g, &bind, feats, s0, st, t, true_tasks, None)?;
    let losses = compute_losses(&mut g, &pass, &model.config, &steps, true_tasks, weights)?;
    g.backward(losses.total)?;
    store.zero_grads();
    store.absorb_grads(&g, &bind);
    Ok([
        g.value(losses.align)[0] as f64,
        g.value(losses.state)[0] as f64,
        g.value(losses.step)[0] as f64,
        losses.task.map_or(0.0, |l| g.value(l)[0] as f64),
    ])
}

/// Trains in place. Batches group samples of equal horizon; batch order is
/// reshuffled every epoch. Test metrics (argmax decoding) are logged per
/// epoch and drive best-SR checkpointing when a path is configured.
pub fn fit(
    store: &mut ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    train: &[ProcedureSample],
    test: &[ProcedureSample],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    check_samples(train, &model.config, "train")?;
    check_samples(test, &model.config, "test")?;

    let mut by_t: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_t.entry(s.steps.len()).or_default().push(i);
    }

    let mut adam = AdamState::new(store);
    let mut report = TrainReport {
        best_sr: f64::NEG_INFINITY,
        ..TrainReport::default()
    };

    for epoch in 0..config.epochs {
        // Same-horizon batches, shuffled within each horizon, then the
        // horizons' batches interleaved in a seeded order.
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (&t, idxs) in &by_t {
            for local in epoch_batches(idxs.len(), config.batch_size, config.seed ^ t as u64, epoch)
            {
                batches.push((t, local.into_iter().map(|l| idxs[l]).collect()));
            }
        }
        let mut order_rng = ChaCha8Rng::seed_from_u64(
            config
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(epoch as u64),
        );
        batches.shuffle(&mut order_rng);

        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for (batch_idx, (t, idxs)) in batches.iter().enumerate() {
            let graph_seed = config
                .seed
                .wrapping_add((epoch as u64) << 20)
                .wrapping_add(batch_idx as u64);
            let vals = run_batch(store, model, feats, train, idxs, *t, graph_seed, &config.weights)
                .map_err(|source| TrainError::Batch {
                    epoch,
                    batch: batch_idx,
                    source,
                })?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.step(store, &config.adam, epoch);
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * idxs.len() as f64;
            }
            seen += idxs.len();
        }

        let (sr, macc, miou) = if test.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            pooled_metrics(store, model, feats, test)?
        };
        let n = seen as f64;
        report.epochs.push(EpochStats {
            epoch,
            l_align: sums[0] / n,
            l_state: sums[1] / n,
            l_step: sums[2] / n,
            l_task: sums[3] / n,
            lr: config.adam.lr_at_epoch(epoch),
            sr,
            macc,
            miou,
        });

        if sr.is_finite() && sr > report.best_sr {
            report.best_sr = sr;
            report.best_epoch = Some(epoch);
            if let Some(path) = &config.checkpoint {
                save_model(
                    path,
                    store,
                    model,
                    serde_json::json!({ "epoch": epoch, "sr": sr }),
                )?;
            }
        }
    }
    Ok(report)
}
