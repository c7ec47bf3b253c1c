//! Frozen text features for descriptions, and their arrangement into the
//! description-memory layout consumed by the encoders.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{CorpusError, DescriptionCorpus, StateSide};

/// Identifies one description within a step class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DescKind {
    Before(usize),
    After(usize),
    /// The single step description (`j` is irrelevant).
    Step,
}

impl std::fmt::Display for DescKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DescKind::Before(j) => write!(f, "before[{j}]"),
            DescKind::After(j) => write!(f, "after[{j}]"),
            DescKind::Step => write!(f, "step"),
        }
    }
}

/// A frozen sentence-to-vector map. Implementations must be pure.
pub trait TextFeaturizer {
    fn dim(&self) -> usize;
    fn feature(&self, class: usize, kind: DescKind, text: &str) -> Result<Vec<f32>, CorpusError>;
}

/// Seeded hashed bag-of-words: each token hashes to a signed bucket. Output
/// is L2-normalized so downstream scales do not depend on sentence length.
pub struct HashedBow {
    dim: usize,
    seed: u64,
}

impl HashedBow {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0);
        HashedBow { dim, seed }
    }
}

impl TextFeaturizer for HashedBow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, _class: usize, _kind: DescKind, text: &str) -> Result<Vec<f32>, CorpusError> {
        let mut v = vec![0f32; self.dim];
        for tok in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(tok.to_ascii_lowercase().as_bytes());
            let d = h.finalize();
            let idx = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % self.dim;
            let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Ok(v)
    }
}

/// Externally supplied vectors, keyed by (class, kind). The text is ignored;
/// this is the ingestion path for any pre-run sentence encoder.
pub struct Precomputed {
    dim: usize,
    map: HashMap<(usize, DescKind), Vec<f32>>,
}

impl Precomputed {
    pub fn new(dim: usize) -> Self {
        Precomputed {
            dim,
            map: HashMap::new(),
        }
    }

    pub fn insert(&mut self, class: usize, kind: DescKind, v: Vec<f32>) -> Result<(), CorpusError> {
        if v.len() != self.dim {
            return Err(CorpusError::FeatureDim {
                expected: self.dim,
                got: v.len(),
            });
        }
        self.map.insert((class, kind), v);
        Ok(())
    }
}

impl TextFeaturizer for Precomputed {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, class: usize, kind: DescKind, _text: &str) -> Result<Vec<f32>, CorpusError> {
        self.map
            .get(&(class, kind))
            .cloned()
            .ok_or(CorpusError::MissingFeature {
                class,
                kind: kind.to_string(),
            })
    }
}

/// Raw (pre-projection) features for every description, in the canonical
/// memory layout: all before rows ordered by (class, j), then all after rows.
/// Cached once; the trainable projection re-embeds these every step.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DescriptionFeatures {
    pub c: usize,
    pub k: usize,
    pub dim: usize,
    /// `2*c*k` rows by `dim`.
    pub state_rows: Vec<f32>,
    /// `c` rows by `dim`: the step descriptions (for memory-source swaps).
    pub step_rows: Vec<f32>,
}

impl DescriptionFeatures {
    /// Row of (class, side, j) in `state_rows`.
    pub fn row(&self, class: usize, side: StateSide, j: usize) -> usize {
        debug_assert!(class < self.c && j < self.k);
        match side {
            StateSide::Before => class * self.k + j,
            StateSide::After => self.c * self.k + class * self.k + j,
        }
    }

    pub fn num_state_rows(&self) -> usize {
        2 * self.c * self.k
    }
}

/// Featurizes a whole corpus into the canonical layout.
pub fn embed_corpus(
    corpus: &DescriptionCorpus,
    featurizer: &dyn TextFeaturizer,
) -> Result<DescriptionFeatures, CorpusError> {
    let (c, k, dim) = (corpus.num_classes(), corpus.k(), featurizer.dim());
    let mut out = DescriptionFeatures {
        c,
        k,
        dim,
        state_rows: vec![0.0; 2 * c * k * dim],
        step_rows: vec![0.0; c * dim],
    };
    let put = |row: usize, v: Vec<f32>, rows: &mut Vec<f32>| -> Result<(), CorpusError> {
        if v.len() != dim {
            return Err(CorpusError::FeatureDim {
                expected: dim,
                got: v.len(),
            });
        }
        rows[row * dim..(row + 1) * dim].copy_from_slice(&v);
        Ok(())
    };
    for (class, set) in corpus.iter() {
        for (j, text) in set.before.iter().enumerate() {
            let v = featurizer.feature(class, DescKind::Before(j), text)?;
            let row = out.row(class, StateSide::Before, j);
            put(row, v, &mut out.state_rows)?;
        }
        for (j, text) in set.after.iter().enumerate() {
            let v = featurizer.feature(class, DescKind::After(j), text)?;
            let row = out.row(class, StateSide::After, j);
            put(row, v, &mut out.state_rows)?;
        }
        let v = featurizer.feature(class, DescKind::Step, &set.step_description)?;
        put(class, v, &mut out.step_rows)?;
    }
    Ok(out)
}
