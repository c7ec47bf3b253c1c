//! The planning network: a state decoder that imputes intermediate states
//! between the observed start and goal, and a step decoder that reads actions
//! off the interleaved state sequence. Both cross-attend to an external
//! memory of encoded step descriptions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DescriptionFeatures;
use crate::encoders::{DescriptionEncoder, ProjectionShape, StateEncoder};
use crate::rngutil::gaussian;
use crate::tensor::{Graph, Init, ParamBinding, ParamId, ParamStore, Real, TensorError, TensorId};

#[cfg(test)]
mod tests;

const LN_EPS: f64 = 1e-5;

/// Decoder hyperparameters (shared by both decoders).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub embed_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            blocks: 2,
            heads: 32,
            hidden: 128,
            dropout: 0.2,
            embed_dim: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.blocks == 0 || self.heads == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(TensorError::BadArgument {
                op: "decoder_config",
                detail: "blocks, heads, hidden and embed_dim must be positive".into(),
            });
        }
        if self.embed_dim % self.heads != 0 {
            return Err(TensorError::BadArgument {
                op: "decoder_config",
                detail: format!(
                    "embed_dim {} not divisible by heads {}",
                    self.embed_dim, self.heads
                ),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::BadArgument {
                op: "decoder_config",
                detail: format!("dropout must be in [0, 1), got {}", self.dropout),
            });
        }
        Ok(())
    }
}

/// What the decoders cross-attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemorySource {
    /// Before/after state descriptions in canonical layout (the full model).
    StateDescriptions,
    /// One step-description row per class.
    StepDescriptions,
    /// Fixed random unit rows; the memory-content ablation.
    Random,
}

/// Everything needed to build (or rebuild) a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Dim of the frozen observation features.
    pub feature_dim: usize,
    /// Dim of the frozen description features; defaults to `feature_dim`.
    pub desc_feature_dim: Option<usize>,
    pub num_classes: usize,
    pub num_tasks: usize,
    /// Descriptions per state side (K).
    pub k: usize,
    /// Longest plan length the positional tables support.
    pub max_horizon: usize,
    pub decoder: DecoderConfig,
    /// Inject the task embedding into queries (and train the task head).
    pub use_task_feature: bool,
    /// `false` shares one decoder stack between states and steps (ablation).
    pub two_decoders: bool,
    pub memory_source: MemorySource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 0,
            desc_feature_dim: None,
            num_classes: 0,
            num_tasks: 0,
            k: 3,
            max_horizon: 6,
            decoder: DecoderConfig::default(),
            use_task_feature: true,
            two_decoders: true,
            memory_source: MemorySource::StateDescriptions,
        }
    }
}

impl ModelConfig {
    pub fn desc_dim(&self) -> usize {
        self.desc_feature_dim.unwrap_or(self.feature_dim)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.decoder.validate()?;
        let positive: [(&str, usize); 6] = [
            ("feature_dim", self.feature_dim),
            ("desc_feature_dim", self.desc_dim()),
            ("num_classes", self.num_classes),
            ("num_tasks", self.num_tasks),
            ("k", self.k),
            ("max_horizon", self.max_horizon),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(TensorError::BadArgument {
                    op: "model_config",
                    detail: format!("{field} must be positive"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Self {
        LayerNormParams {
            gamma: store.add(&format!("{prefix}.gamma"), 1, dim, Init::Ones, rng),
            beta: store.add(&format!("{prefix}.beta"), 1, dim, Init::Zeros, rng),
        }
    }

    fn apply<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        g.layer_norm(x, bind.tensor(self.gamma), bind.tensor(self.beta), LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct AttentionParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl AttentionParams {
    fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
    ) -> Self {
        let mut mat = |n: &str| store.add(&format!("{prefix}.{n}"), dim, dim, Init::XavierUniform, rng);
        AttentionParams {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
        }
    }

    /// `kv` is the same tensor as `x` for self-attention, or the shared
    /// memory (`shared_kv`) for cross-attention.
    fn apply<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        x: TensorId,
        kv: TensorId,
        heads: usize,
        groups: usize,
        shared_kv: bool,
    ) -> Result<TensorId, TensorError> {
        let q = g.matmul(x, bind.tensor(self.wq))?;
        let k = g.matmul(kv, bind.tensor(self.wk))?;
        let v = g.matmul(kv, bind.tensor(self.wv))?;
        let a = g.attention(q, k, v, heads, groups, shared_kv)?;
        g.matmul(a, bind.tensor(self.wo))
    }
}

#[derive(Debug, Clone)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FfnParams {
    fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        FfnParams {
            w1: store.add(&format!("{prefix}.w1"), in_dim, hidden, Init::XavierUniform, rng),
            b1: store.add(&format!("{prefix}.b1"), 1, hidden, Init::Zeros, rng),
            w2: store.add(&format!("{prefix}.w2"), hidden, out_dim, Init::XavierUniform, rng),
            b2: store.add(&format!("{prefix}.b2"), 1, out_dim, Init::Zeros, rng),
        }
    }

    fn apply<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let h = g.matmul(x, bind.tensor(self.w1))?;
        let h = g.add_bias(h, bind.tensor(self.b1))?;
        let h = g.relu(h)?;
        let y = g.matmul(h, bind.tensor(self.w2))?;
        g.add_bias(y, bind.tensor(self.b2))
    }
}

/// One decoder block: self-attention, cross-attention over the description
/// memory, then a two-layer projection; residual + post-norm around each.
#[derive(Debug, Clone)]
struct DecoderBlock {
    self_attn: AttentionParams,
    cross_attn: AttentionParams,
    ffn: FfnParams,
    ln1: LayerNormParams,
    ln2: LayerNormParams,
    ln3: LayerNormParams,
}

impl DecoderBlock {
    fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &DecoderConfig,
    ) -> Self {
        let e = cfg.embed_dim;
        DecoderBlock {
            self_attn: AttentionParams::new(store, rng, &format!("{prefix}.self"), e),
            cross_attn: AttentionParams::new(store, rng, &format!("{prefix}.cross"), e),
            ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), e, cfg.hidden, e),
            ln1: LayerNormParams::new(store, rng, &format!("{prefix}.ln1"), e),
            ln2: LayerNormParams::new(store, rng, &format!("{prefix}.ln2"), e),
            ln3: LayerNormParams::new(store, rng, &format!("{prefix}.ln3"), e),
        }
    }

    fn apply<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        x: TensorId,
        memory: TensorId,
        cfg: &DecoderConfig,
        groups: usize,
    ) -> Result<TensorId, TensorError> {
        let a = self
            .self_attn
            .apply(g, bind, x, x, cfg.heads, groups, false)?;
        let a = g.dropout(a, cfg.dropout)?;
        let x = g.add(x, a)?;
        let x = self.ln1.apply(g, bind, x)?;

        let a = self
            .cross_attn
            .apply(g, bind, x, memory, cfg.heads, groups, true)?;
        let a = g.dropout(a, cfg.dropout)?;
        let x = g.add(x, a)?;
        let x = self.ln2.apply(g, bind, x)?;

        let f = self.ffn.apply(g, bind, x)?;
        let f = g.dropout(f, cfg.dropout)?;
        let x = g.add(x, f)?;
        self.ln3.apply(g, bind, x)
    }
}

#[derive(Debug, Clone)]
struct DecoderStack {
    blocks: Vec<DecoderBlock>,
}

impl DecoderStack {
    fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &DecoderConfig,
    ) -> Self {
        DecoderStack {
            blocks: (0..cfg.blocks)
                .map(|i| DecoderBlock::new(store, rng, &format!("{prefix}.block{i}"), cfg))
                .collect(),
        }
    }

    fn apply<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        mut x: TensorId,
        memory: TensorId,
        cfg: &DecoderConfig,
        groups: usize,
    ) -> Result<TensorId, TensorError> {
        for block in &self.blocks {
            x = block.apply(g, bind, x, memory, cfg, groups)?;
        }
        Ok(x)
    }
}

/// Task classifier over (s^enc_0, s^enc_T) plus the learned task embedding
/// table injected into the queries.
#[derive(Debug, Clone)]
pub struct TaskHead {
    mlp: FfnParams,
    table: ParamId,
}

impl TaskHead {
    fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Self {
        let e = cfg.decoder.embed_dim;
        TaskHead {
            mlp: FfnParams::new(store, rng, "task.mlp", 2 * e, cfg.decoder.hidden, cfg.num_tasks),
            table: store.add("task.table", cfg.num_tasks, e, Init::Normal(0.02), rng),
        }
    }

    pub fn logits<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        s0_enc: TensorId,
        st_enc: TensorId,
    ) -> Result<TensorId, TensorError> {
        let x = g.concat_cols(&[s0_enc, st_enc])?;
        self.mlp.apply(g, bind, x)
    }

    pub fn embed<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        tasks: &[usize],
    ) -> Result<TensorId, TensorError> {
        g.gather_rows(bind.tensor(self.table), tasks)
    }
}

#[derive(Debug, Clone)]
struct StepClassifier {
    mlp: FfnParams,
}

/// One full forward pass, eagerly evaluated; fields are graph node ids.
#[derive(Debug)]
pub struct ForwardPass {
    pub batch: usize,
    pub t: usize,
    /// (batch, embed) encoded start / goal observations.
    pub s0_enc: TensorId,
    pub st_enc: TensorId,
    /// Canonical before/after description memory, (2·C·K, embed). Losses and
    /// mid-state targets always use this one.
    pub state_memory: TensorId,
    /// What the decoders attended to (equals `state_memory` unless the
    /// memory-source ablation swapped it).
    pub memory: TensorId,
    /// (batch·(t−1), embed) imputed mid-states ŝ^dec.
    pub mid_states: TensorId,
    /// (batch·t, embed) action-slot outputs.
    pub step_embeddings: TensorId,
    /// (batch·t, C) step classifier logits.
    pub step_logits: TensorId,
    /// (batch, num_tasks); None when the task feature is disabled.
    pub task_logits: Option<TensorId>,
    /// Task ids injected into the queries (ground truth or argmax).
    pub task_ids: Option<Vec<usize>>,
}

/// The planner: encoders, two decoder stacks, step classifier, task head,
/// positional tables. Parameters live in a [`ParamStore`]; the model holds
/// ids only, so one model instance drives both f32 training and f64
/// gradient checking.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub config: ModelConfig,
    pub state_encoder: StateEncoder,
    pub desc_encoder: DescriptionEncoder,
    state_decoder: DecoderStack,
    step_decoder: Option<DecoderStack>,
    step_classifier: StepClassifier,
    task_head: Option<TaskHead>,
    pos_state: ParamId,
    pos_step: ParamId,
    /// Fixed rows for [`MemorySource::Random`], generated at construction.
    random_memory: Option<Vec<f32>>,
}

impl PlannerModel {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        config: ModelConfig,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        let dec = &config.decoder;
        let e = dec.embed_dim;
        let state_shape = ProjectionShape {
            in_dim: config.feature_dim,
            hidden_dim: dec.hidden,
            embed_dim: e,
            dropout: dec.dropout,
        };
        let desc_shape = ProjectionShape {
            in_dim: config.desc_dim(),
            ..state_shape
        };
        let state_encoder = StateEncoder::new(store, rng, state_shape);
        let desc_encoder = DescriptionEncoder::new(store, rng, desc_shape);
        let state_decoder = DecoderStack::new(store, rng, "dec_state", dec);
        let step_decoder = if config.two_decoders {
            Some(DecoderStack::new(store, rng, "dec_step", dec))
        } else {
            None
        };
        let step_classifier = StepClassifier {
            mlp: FfnParams::new(store, rng, "stepcls", e, dec.hidden, config.num_classes),
        };
        let task_head = if config.use_task_feature {
            Some(TaskHead::new(store, rng, &config))
        } else {
            None
        };
        let pos_state = store.add("pos.state", config.max_horizon + 1, e, Init::Normal(0.02), rng);
        let pos_step = store.add(
            "pos.step",
            2 * config.max_horizon + 1,
            e,
            Init::Normal(0.02),
            rng,
        );
        let random_memory = if config.memory_source == MemorySource::Random {
            let rows = 2 * config.num_classes * config.k;
            let mut m = vec![0.0f32; rows * e];
            for r in 0..rows {
                let row = &mut m[r * e..(r + 1) * e];
                for x in row.iter_mut() {
                    *x = gaussian(rng) as f32;
                }
                let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
            Some(m)
        } else {
            None
        };
        Ok(PlannerModel {
            config,
            state_encoder,
            desc_encoder,
            state_decoder,
            step_decoder,
            step_classifier,
            task_head,
            pos_state,
            pos_step,
            random_memory,
        })
    }

    pub fn task_head(&self) -> Option<&TaskHead> {
        self.task_head.as_ref()
    }

    /// The fixed rows backing [`MemorySource::Random`], if that source is
    /// configured. Not a trainable parameter, so checkpoints carry it
    /// separately.
    pub fn random_memory(&self) -> Option<&[f32]> {
        self.random_memory.as_deref()
    }

    pub fn set_random_memory(&mut self, rows: Vec<f32>) -> Result<(), TensorError> {
        if self.config.memory_source != MemorySource::Random {
            return Err(TensorError::BadArgument {
                op: "set_random_memory",
                detail: "memory source is not random".into(),
            });
        }
        let want = 2 * self.config.num_classes * self.config.k * self.config.decoder.embed_dim;
        if rows.len() != want {
            return Err(TensorError::BadArgument {
                op: "set_random_memory",
                detail: format!("{} values, expected {want}", rows.len()),
            });
        }
        self.random_memory = Some(rows);
        Ok(())
    }

    fn check_horizon(&self, t: usize) -> Result<(), TensorError> {
        if t < 2 {
            return Err(TensorError::BadArgument {
                op: "decode_states",
                detail: format!("planning horizon must be >= 2, got {t}"),
            });
        }
        if t > self.config.max_horizon {
            return Err(TensorError::BadArgument {
                op: "decode_states",
                detail: format!(
                    "horizon {t} exceeds max_horizon {}",
                    self.config.max_horizon
                ),
            });
        }
        Ok(())
    }

    /// The decoder memory per the configured source.
    pub fn build_memory<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        feats: &DescriptionFeatures,
        state_memory: TensorId,
    ) -> Result<TensorId, TensorError> {
        match self.config.memory_source {
            MemorySource::StateDescriptions => Ok(state_memory),
            MemorySource::StepDescriptions => {
                self.desc_encoder.encode_step_memory(g, bind, feats)
            }
            MemorySource::Random => {
                let rows = self.random_memory.as_ref().expect("set at construction");
                let e = self.config.decoder.embed_dim;
                let data: Vec<E> = rows.iter().map(|&x| E::from_f32(x)).collect();
                g.input(&data, rows.len() / e, e)
            }
        }
    }

    /// Task logits plus the embedding rows added to every query position.
    /// Training requires ground-truth labels (teacher forcing); inference
    /// embeds the argmax task.
    pub fn task_feature<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        s0_enc: TensorId,
        st_enc: TensorId,
        true_tasks: Option<&[usize]>,
    ) -> Result<(TensorId, TensorId, Vec<usize>), TensorError> {
        let head = self.task_head.as_ref().ok_or(TensorError::BadArgument {
            op: "task_feature",
            detail: "task feature disabled in config".into(),
        })?;
        let logits = head.logits(g, bind, s0_enc, st_enc)?;
        let ids: Vec<usize> = match true_tasks {
            Some(labels) => {
                let batch = g.shape(s0_enc).0;
                if labels.len() != batch {
                    return Err(TensorError::BadArgument {
                        op: "task_feature",
                        detail: format!("{} labels for batch {batch}", labels.len()),
                    });
                }
                labels.to_vec()
            }
            None => {
                if g.training() {
                    return Err(TensorError::BadArgument {
                        op: "task_feature",
                        detail: "training requires ground-truth task labels".into(),
                    });
                }
                let (rows, cols) = g.shape(logits);
                let v = g.value(logits);
                (0..rows)
                    .map(|r| {
                        let row = &v[r * cols..(r + 1) * cols];
                        let mut best = 0;
                        for (i, &x) in row.iter().enumerate() {
                            if x.to_f64() > row[best].to_f64() {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect()
            }
        };
        let rows = head.embed(g, bind, &ids)?;
        Ok((logits, rows, ids))
    }

    /// Q_s: per sample `[s^enc_0 + p_0, p_1, …, p_{T−1}, s^enc_T + p_T]`,
    /// flattened to (batch·(t+1), embed).
    fn build_state_query<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        s0_enc: TensorId,
        st_enc: TensorId,
        t: usize,
        extras: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        let batch = g.shape(s0_enc).0;
        let e = self.config.decoder.embed_dim;
        let zero = g.input(&vec![E::ZERO; e], 1, e)?;
        let src = g.concat_rows(&[s0_enc, st_enc, zero])?;
        let mut idx_src = Vec::with_capacity(batch * (t + 1));
        let mut idx_pos = Vec::with_capacity(batch * (t + 1));
        for b in 0..batch {
            for pos in 0..=t {
                idx_src.push(match pos {
                    0 => b,
                    p if p == t => batch + b,
                    _ => 2 * batch,
                });
                idx_pos.push(pos);
            }
        }
        let states = g.gather_rows(src, &idx_src)?;
        let pos = g.gather_rows(bind.tensor(self.pos_state), &idx_pos)?;
        let mut q = g.add(states, pos)?;
        for &extra in extras {
            q = g.add(q, extra)?;
        }
        Ok(q)
    }

    /// Q_a: per sample the interleaved length-(2t+1) sequence; even slots
    /// carry state embeddings (s^enc_0, ŝ^dec_1, …, ŝ^dec_{T−1}, s^enc_T),
    /// odd slots are action queries (positional only).
    fn build_step_query<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        s0_enc: TensorId,
        st_enc: TensorId,
        mid_states: TensorId,
        t: usize,
        extras: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        let batch = g.shape(s0_enc).0;
        let e = self.config.decoder.embed_dim;
        let len = 2 * t + 1;
        let zero = g.input(&vec![E::ZERO; e], 1, e)?;
        let src = g.concat_rows(&[s0_enc, st_enc, mid_states, zero])?;
        let zero_row = 2 * batch + batch * (t - 1);
        let mut idx_src = Vec::with_capacity(batch * len);
        let mut idx_pos = Vec::with_capacity(batch * len);
        for b in 0..batch {
            for r in 0..len {
                idx_src.push(if r % 2 == 1 {
                    zero_row
                } else {
                    match r / 2 {
                        0 => b,
                        h if h == t => batch + b,
                        h => 2 * batch + b * (t - 1) + (h - 1),
                    }
                });
                idx_pos.push(r);
            }
        }
        let states = g.gather_rows(src, &idx_src)?;
        let pos = g.gather_rows(bind.tensor(self.pos_step), &idx_pos)?;
        let mut q = g.add(states, pos)?;
        for &extra in extras {
            q = g.add(q, extra)?;
        }
        Ok(q)
    }

    /// Runs the state decoder over Q_s and returns the imputed mid-states:
    /// rows 1..t−1 of each sample, (batch·(t−1), embed).
    pub fn decode_states<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        q_s: TensorId,
        memory: TensorId,
        batch: usize,
        t: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_horizon(t)?;
        let rows = g.shape(q_s).0;
        if rows != batch * (t + 1) {
            return Err(TensorError::BadArgument {
                op: "decode_states",
                detail: format!("Q_s has {rows} rows, expected batch {batch} x {}", t + 1),
            });
        }
        let h = self
            .state_decoder
            .apply(g, bind, q_s, memory, &self.config.decoder, batch)?;
        let mut idx = Vec::with_capacity(batch * (t - 1));
        for b in 0..batch {
            for pos in 1..t {
                idx.push(b * (t + 1) + pos);
            }
        }
        g.gather_rows(h, &idx)
    }

    /// Runs the step decoder over Q_a and returns the action-slot outputs,
    /// (batch·t, embed).
    pub fn decode_steps<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        q_a: TensorId,
        memory: TensorId,
        batch: usize,
        t: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_horizon(t)?;
        let rows = g.shape(q_a).0;
        let len = 2 * t + 1;
        if rows != batch * len {
            return Err(TensorError::BadArgument {
                op: "decode_steps",
                detail: format!("Q_a has {rows} rows, expected batch {batch} x {len}"),
            });
        }
        let stack = self.step_decoder.as_ref().unwrap_or(&self.state_decoder);
        let h = stack.apply(g, bind, q_a, memory, &self.config.decoder, batch)?;
        let mut idx = Vec::with_capacity(batch * t);
        for b in 0..batch {
            for slot in 0..t {
                idx.push(b * len + 2 * slot + 1);
            }
        }
        g.gather_rows(h, &idx)
    }

    /// Per-position step logits from action-slot embeddings.
    pub fn classify_steps<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        step_embeddings: TensorId,
    ) -> Result<TensorId, TensorError> {
        self.step_classifier.mlp.apply(g, bind, step_embeddings)
    }

    /// Encode → task feature → decode states → decode steps → classify.
    ///
    /// `s0`, `st`: (batch, feature_dim) raw observation features already in
    /// the graph. `true_tasks` is required in training mode when the task
    /// feature is on. `noise` adds a per-position Gaussian to both queries
    /// (the probabilistic variant).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        feats: &DescriptionFeatures,
        s0: TensorId,
        st: TensorId,
        t: usize,
        true_tasks: Option<&[usize]>,
        mut noise: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<ForwardPass, TensorError> {
        self.check_horizon(t)?;
        let (batch, fdim) = g.shape(s0);
        if g.shape(st) != (batch, fdim) || fdim != self.config.feature_dim {
            return Err(TensorError::BadArgument {
                op: "forward",
                detail: format!(
                    "start {:?} / goal {:?} features, model expects (batch, {})",
                    g.shape(s0),
                    g.shape(st),
                    self.config.feature_dim
                ),
            });
        }
        if feats.c != self.config.num_classes || feats.k != self.config.k {
            return Err(TensorError::BadArgument {
                op: "forward",
                detail: format!(
                    "corpus features C={} K={}, model expects C={} K={}",
                    feats.c, feats.k, self.config.num_classes, self.config.k
                ),
            });
        }
        let e = self.config.decoder.embed_dim;

        let s0_enc = self.state_encoder.encode(g, bind, s0)?;
        let st_enc = self.state_encoder.encode(g, bind, st)?;
        let state_memory = self.desc_encoder.encode_memory(g, bind, feats)?;
        let memory = self.build_memory(g, bind, feats, state_memory)?;

        let mut extras_s: Vec<TensorId> = Vec::new();
        let mut extras_a: Vec<TensorId> = Vec::new();
        let (task_logits, task_ids) = if self.config.use_task_feature {
            let (logits, rows, ids) = self.task_feature(g, bind, s0_enc, st_enc, true_tasks)?;
            // Tile the per-sample embedding over every query position.
            let tile_s: Vec<usize> = (0..batch).flat_map(|b| vec![b; t + 1]).collect();
            let tile_a: Vec<usize> = (0..batch).flat_map(|b| vec![b; 2 * t + 1]).collect();
            extras_s.push(g.gather_rows(rows, &tile_s)?);
            extras_a.push(g.gather_rows(rows, &tile_a)?);
            (Some(logits), Some(ids))
        } else {
            (None, None)
        };
        if let Some((rng, sigma)) = noise.take() {
            if sigma > 0.0 {
                let mut draw = |rows: usize| -> Result<TensorId, TensorError> {
                    let data: Vec<E> = (0..rows * e)
                        .map(|_| E::from_f64(gaussian(rng) * sigma))
                        .collect();
                    g.input(&data, rows, e)
                };
                extras_s.push(draw(batch * (t + 1))?);
                extras_a.push(draw(batch * (2 * t + 1))?);
            }
        }

        let q_s = self.build_state_query(g, bind, s0_enc, st_enc, t, &extras_s)?;
        let mid_states = self.decode_states(g, bind, q_s, memory, batch, t)?;
        let q_a = self.build_step_query(g, bind, s0_enc, st_enc, mid_states, t, &extras_a)?;
        let step_embeddings = self.decode_steps(g, bind, q_a, memory, batch, t)?;
        let step_logits = self.classify_steps(g, bind, step_embeddings)?;

        Ok(ForwardPass {
            batch,
            t,
            s0_enc,
            st_enc,
            state_memory,
            memory,
            mid_states,
            step_embeddings,
            step_logits,
            task_logits,
            task_ids,
        })
    }
}
