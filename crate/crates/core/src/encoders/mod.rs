//! Shared-space encoders: trainable two-layer projections over frozen
//! features, plus the K-summed dot-product similarity between encoded states
//! and encoded step descriptions.
//!
//! Both encoders normalize their output rows to unit L2 length, so every
//! similarity lives in [-K, K] and the contrastive softmax needs no
//! temperature.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{DescriptionFeatures, StateSide};
use crate::tensor::{Graph, Init, ParamBinding, ParamId, ParamStore, Real, TensorError, TensorId};


/// Epsilon inside the row-normalization sqrt.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("unknown step class {class} (memory has {num_classes})")]
    UnknownClass { class: usize, num_classes: usize },
    #[error("embedding dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Shape of one projection head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionShape {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub dropout: f64,
}

/// Two-layer feed-forward projection: linear -> ReLU -> dropout -> linear,
/// rows L2-normalized at the end.
#[derive(Debug, Clone)]
pub struct Projection {
    pub shape: ProjectionShape,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Projection {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        shape: ProjectionShape,
    ) -> Self {
        let w1 = store.add(
            &format!("{prefix}.w1"),
            shape.in_dim,
            shape.hidden_dim,
            Init::XavierUniform,
            rng,
        );
        let b1 = store.add(&format!("{prefix}.b1"), 1, shape.hidden_dim, Init::Zeros, rng);
        let w2 = store.add(
            &format!("{prefix}.w2"),
            shape.hidden_dim,
            shape.embed_dim,
            Init::XavierUniform,
            rng,
        );
        // Small random output bias: keeps rows off the exact zero vector
        // (where row normalization is non-smooth) even if ReLU or dropout
        // kills the whole hidden layer for some input.
        let b2 = store.add(&format!("{prefix}.b2"), 1, shape.embed_dim, Init::Normal(0.02), rng);
        Projection {
            shape,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// `x`: (rows, in_dim) -> (rows, embed_dim) with unit rows.
    pub fn apply<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (_, cols) = g.shape(x);
        if cols != self.shape.in_dim {
            return Err(TensorError::BadArgument {
                op: "projection",
                detail: format!("input dim {cols}, projection expects {}", self.shape.in_dim),
            });
        }
        let h = g.matmul(x, bind.tensor(self.w1))?;
        let h = g.add_bias(h, bind.tensor(self.b1))?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.shape.dropout)?;
        let y = g.matmul(h, bind.tensor(self.w2))?;
        let y = g.add_bias(y, bind.tensor(self.b2))?;
        g.l2_normalize_rows(y, NORM_EPS)
    }
}

/// Visual-side encoder: frozen features arrive precomputed per observation;
/// only the projection trains.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    pub proj: Projection,
}

impl StateEncoder {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        shape: ProjectionShape,
    ) -> Self {
        StateEncoder {
            proj: Projection::new(store, rng, "enc_s", shape),
        }
    }

    /// `x`: (batch, in_dim) observation features -> (batch, embed_dim).
    pub fn encode<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        self.proj.apply(g, bind, x)
    }
}

/// Text-side encoder over frozen description features.
#[derive(Debug, Clone)]
pub struct DescriptionEncoder {
    pub proj: Projection,
}

impl DescriptionEncoder {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        shape: ProjectionShape,
    ) -> Self {
        DescriptionEncoder {
            proj: Projection::new(store, rng, "enc_d", shape),
        }
    }

    /// The live description memory M: (2·C·K, embed_dim) in canonical layout
    /// (all before rows by (class, j), then all after rows). Rebuilt per
    /// training step because the projection is trainable.
    pub fn encode_memory<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        feats: &DescriptionFeatures,
    ) -> Result<TensorId, TensorError> {
        let data: Vec<E> = feats.state_rows.iter().map(|&x| E::from_f32(x)).collect();
        let x = g.input(&data, feats.num_state_rows(), feats.dim)?;
        self.proj.apply(g, bind, x)
    }

    /// Step-description rows (C, embed_dim); the memory-source ablation swaps
    /// these in for the state rows.
    pub fn encode_step_memory<E: Real>(
        &self,
        g: &mut Graph<E>,
        bind: &ParamBinding,
        feats: &DescriptionFeatures,
    ) -> Result<TensorId, TensorError> {
        let data: Vec<E> = feats.step_rows.iter().map(|&x| E::from_f32(x)).collect();
        let x = g.input(&data, feats.c, feats.dim)?;
        self.proj.apply(g, bind, x)
    }
}

/// In-graph class similarities for one side: `states` (B, embed) against
/// memory (2·C·K, embed) -> (B, C), where entry (b, i) is the K-summed dot
/// product sim(s_b, A_i).
pub fn class_sims<E: Real>(
    g: &mut Graph<E>,
    states: TensorId,
    memory: TensorId,
    c: usize,
    k: usize,
    side: StateSide,
) -> Result<TensorId, TensorError> {
    let (rows, _) = g.shape(memory);
    if rows != 2 * c * k {
        return Err(TensorError::BadArgument {
            op: "class_sims",
            detail: format!("memory has {rows} rows, expected {}", 2 * c * k),
        });
    }
    let offset = match side {
        StateSide::Before => 0,
        StateSide::After => c * k,
    };
    let idx: Vec<usize> = (offset..offset + c * k).collect();
    let side_rows = g.gather_rows(memory, &idx)?;
    let raw = g.matmul_nt(states, side_rows)?; // (B, C·K)
    // Fixed selector summing each class's K columns.
    let mut sel = vec![E::ZERO; c * k * c];
    for class in 0..c {
        for j in 0..k {
            sel[(class * k + j) * c + class] = E::ONE;
        }
    }
    let sel = g.input(&sel, c * k, c)?;
    g.matmul(raw, sel)
}

/// A materialized memory snapshot: plain values for similarity queries
/// outside any graph (zero-shot step classification, mid-state targets at
/// inference).
#[derive(Debug, Clone)]
pub struct EncodedMemory {
    pub c: usize,
    pub k: usize,
    pub embed_dim: usize,
    rows: Vec<f32>,
}

impl EncodedMemory {
    pub fn new(c: usize, k: usize, embed_dim: usize, rows: Vec<f32>) -> Result<Self, EncoderError> {
        if rows.len() != 2 * c * k * embed_dim {
            return Err(EncoderError::DimMismatch {
                expected: 2 * c * k * embed_dim,
                got: rows.len(),
            });
        }
        Ok(EncodedMemory {
            c,
            k,
            embed_dim,
            rows,
        })
    }

    /// Copies the values of an in-graph memory tensor.
    pub fn from_graph<E: Real>(
        g: &Graph<E>,
        memory: TensorId,
        c: usize,
        k: usize,
    ) -> Result<Self, EncoderError> {
        let (rows, embed_dim) = g.shape(memory);
        if rows != 2 * c * k {
            return Err(EncoderError::DimMismatch {
                expected: 2 * c * k,
                got: rows,
            });
        }
        let data: Vec<f32> = g.value(memory).iter().map(|x| x.to_f32()).collect();
        EncodedMemory::new(c, k, embed_dim, data)
    }

    pub fn row(&self, class: usize, side: StateSide, j: usize) -> Result<&[f32], EncoderError> {
        if class >= self.c {
            return Err(EncoderError::UnknownClass {
                class,
                num_classes: self.c,
            });
        }
        debug_assert!(j < self.k);
        let r = match side {
            StateSide::Before => class * self.k + j,
            StateSide::After => self.c * self.k + class * self.k + j,
        };
        Ok(&self.rows[r * self.embed_dim..(r + 1) * self.embed_dim])
    }

    /// sim(state, A_class) for one side: the sum over the class's K
    /// description embeddings of their dot products with `state`.
    pub fn similarity(
        &self,
        state: &[f32],
        class: usize,
        side: StateSide,
    ) -> Result<f64, EncoderError> {
        if state.len() != self.embed_dim {
            return Err(EncoderError::DimMismatch {
                expected: self.embed_dim,
                got: state.len(),
            });
        }
        let mut sum = 0.0f64;
        for j in 0..self.k {
            let d = self.row(class, side, j)?;
            sum += state
                .iter()
                .zip(d)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
        }
        Ok(sum)
    }

    /// Argmax over classes of `similarity`; ties go to the lowest class.
    pub fn best_class(&self, state: &[f32], side: StateSide) -> Result<usize, EncoderError> {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for class in 0..self.c {
            let s = self.similarity(state, class, side)?;
            if s > best_sim {
                best_sim = s;
                best = class;
            }
        }
        Ok(best)
    }
}
