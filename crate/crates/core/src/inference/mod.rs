//! Plan extraction: argmax decoding, Viterbi over co-occurrence transitions,
//! and multi-plan sampling for the probabilistic variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DescriptionFeatures;
use crate::dataworld::ProcedureSample;
use crate::planner::PlannerModel;
use crate::tensor::{Graph, ParamStore, TensorError};


/// Additive smoothing on transition counts, so unseen-but-valid pairs are
/// merely improbable instead of impossible.
pub const TRANSITION_EPS: f64 = 1e-6;

/// Forward passes are chunked to keep graph memory bounded.
const PLAN_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("empty training label set")]
    EmptyTraining,
    #[error("label {label} out of range for {c} classes")]
    LabelOutOfRange { label: usize, c: usize },
    #[error("bad emissions: {detail}")]
    BadEmissions { detail: String },
    #[error("bad argument: {detail}")]
    BadArgument { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Row-stochastic step-transition matrix estimated from consecutive label
/// pairs in the training procedures.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub c: usize,
    counts: Vec<u64>,
    log_a: Vec<f64>,
}

impl TransitionModel {
    pub fn from_labels(sequences: &[Vec<usize>], c: usize) -> Result<Self, InferenceError> {
        if c == 0 || sequences.is_empty() {
            return Err(InferenceError::EmptyTraining);
        }
        let mut counts = vec![0u64; c * c];
        for seq in sequences {
            for &l in seq {
                if l >= c {
                    return Err(InferenceError::LabelOutOfRange { label: l, c });
                }
            }
            for pair in seq.windows(2) {
                counts[pair[0] * c + pair[1]] += 1;
            }
        }
        Ok(Self::from_counts(c, counts))
    }

    /// Uninformative transitions: Viterbi degenerates to per-position argmax.
    pub fn uniform(c: usize) -> Self {
        Self::from_counts(c, vec![0u64; c * c])
    }

    fn from_counts(c: usize, counts: Vec<u64>) -> Self {
        let mut log_a = vec![0.0f64; c * c];
        for i in 0..c {
            let row = &counts[i * c..(i + 1) * c];
            let total: f64 = row.iter().map(|&x| x as f64).sum::<f64>() + TRANSITION_EPS * c as f64;
            for j in 0..c {
                log_a[i * c + j] = ((row[j] as f64 + TRANSITION_EPS) / total).ln();
            }
        }
        TransitionModel { c, counts, log_a }
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.c + to]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.log_a[from * self.c + to].exp()
    }

    pub fn log_prob(&self, from: usize, to: usize) -> f64 {
        self.log_a[from * self.c + to]
    }
}

fn check_emissions(emissions: &[Vec<f64>], c: usize) -> Result<(), InferenceError> {
    if emissions.is_empty() {
        return Err(InferenceError::BadEmissions {
            detail: "no rows".into(),
        });
    }
    for (t, row) in emissions.iter().enumerate() {
        if row.len() != c {
            return Err(InferenceError::BadEmissions {
                detail: format!("row {t} has {} entries, expected {c}", row.len()),
            });
        }
        if !row.iter().all(|&p| p.is_finite() && p >= 0.0) {
            return Err(InferenceError::BadEmissions {
                detail: format!("row {t} has negative or non-finite entries"),
            });
        }
        if row.iter().all(|&p| p == 0.0) {
            return Err(InferenceError::BadEmissions {
                detail: format!("row {t} is all zero"),
            });
        }
    }
    Ok(())
}

/// Max over sequences of `Σ_t ln B[t, a_t] + Σ_t ln A[a_t, a_{t+1}]` by
/// dynamic programming in log space. Ties break toward the lowest class
/// index. Returns the path and its score.
pub fn viterbi_decode(
    emissions: &[Vec<f64>],
    transition: &TransitionModel,
) -> Result<(Vec<usize>, f64), InferenceError> {
    let c = transition.c;
    check_emissions(emissions, c)?;
    let t_len = emissions.len();
    let logb = |t: usize, j: usize| -> f64 {
        let p = emissions[t][j];
        if p > 0.0 {
            p.ln()
        } else {
            f64::NEG_INFINITY
        }
    };

    let mut delta: Vec<f64> = (0..c).map(|j| logb(0, j)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for i in 0..c {
                let s = delta[i] + transition.log_prob(i, j);
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            next[j] = best + logb(t, j);
            arg[j] = best_i;
        }
        delta = next;
        back.push(arg);
    }

    let mut last = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (j, &s) in delta.iter().enumerate() {
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![last; t_len];
    for t in (1..t_len).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    Ok((path, best))
}

/// Brute-force argmax over all C^T sequences under the Viterbi score; the
/// enumeration oracle for small instances.
pub fn exhaustive_best(
    emissions: &[Vec<f64>],
    transition: &TransitionModel,
) -> Result<(Vec<usize>, f64), InferenceError> {
    let c = transition.c;
    check_emissions(emissions, c)?;
    let t_len = emissions.len();
    let mut best_path: Option<Vec<usize>> = None;
    let mut best = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    loop {
        let mut score = 0.0;
        for (t, &a) in path.iter().enumerate() {
            let p = emissions[t][a];
            score += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            if t + 1 < t_len {
                score += transition.log_prob(a, path[t + 1]);
            }
        }
        if score > best {
            best = score;
            best_path = Some(path.clone());
        }
        // Odometer increment; lowest-index paths are visited first, so ties
        // keep the earlier (lexicographically smaller) path.
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return Ok((best_path.expect("at least one path"), best));
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < c {
                break;
            }
            path[pos] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Argmax,
    Viterbi,
    Prob,
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanMode::Argmax => "argmax",
            PlanMode::Viterbi => "viterbi",
            PlanMode::Prob => "prob",
        })
    }
}

/// One decoded plan.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub sample_id: usize,
    pub steps: Vec<usize>,
    /// Log-probability of the chosen path: emissions only for argmax,
    /// emissions + transitions for viterbi.
    pub score: f64,
    pub mode: PlanMode,
    /// Softmaxed step distributions, T rows of C.
    pub emissions: Vec<Vec<f64>>,
    /// Imputed mid-states, (T−1) rows of embed_dim.
    pub mid_states: Vec<Vec<f32>>,
}

/// The JSON-lines record for plan files.
#[derive(Debug, Serialize, Deserialize)]
pub struct PlanRecord {
    pub sample_id: usize,
    pub steps: Vec<usize>,
    pub score: f64,
    pub mode: PlanMode,
}

impl PlanResult {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(&PlanRecord {
            sample_id: self.sample_id,
            steps: self.steps.clone(),
            score: self.score,
            mode: self.mode,
        })
        .expect("plan record serializes")
    }
}

fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn decode_one(
    sample_id: usize,
    emissions: Vec<Vec<f64>>,
    mid_states: Vec<Vec<f32>>,
    mode: PlanMode,
    transition: Option<&TransitionModel>,
) -> Result<PlanResult, InferenceError> {
    let (steps, score) = match mode {
        PlanMode::Viterbi => {
            let tr = transition.ok_or_else(|| InferenceError::BadArgument {
                detail: "viterbi mode needs a transition model".into(),
            })?;
            viterbi_decode(&emissions, tr)?
        }
        PlanMode::Argmax | PlanMode::Prob => {
            let steps: Vec<usize> = emissions.iter().map(|r| argmax_row(r)).collect();
            let score = steps
                .iter()
                .enumerate()
                .map(|(t, &a)| emissions[t][a].ln())
                .sum();
            (steps, score)
        }
    };
    Ok(PlanResult {
        sample_id,
        steps,
        score,
        mode,
        emissions,
        mid_states,
    })
}

/// Decodes a batch of same-horizon samples with one forward pass per chunk.
/// Deterministic: eval mode, no noise, argmax task feature.
pub fn plan_batch(
    store: &ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    samples: &[ProcedureSample],
    mode: PlanMode,
    transition: Option<&TransitionModel>,
) -> Result<Vec<PlanResult>, InferenceError> {
    if samples.is_empty() {
        return Err(InferenceError::BadArgument {
            detail: "no samples to plan".into(),
        });
    }
    let t = samples[0].steps.len();
    if samples.iter().any(|s| s.steps.len() != t) {
        return Err(InferenceError::BadArgument {
            detail: "mixed horizons in one plan batch".into(),
        });
    }
    let e = model.config.decoder.embed_dim;
    let c = model.config.num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for (chunk_idx, chunk) in samples.chunks(PLAN_CHUNK).enumerate() {
        let b = chunk.len();
        let mut g: Graph<f32> = Graph::new();
        let bind = store.bind(&mut g)?;
        let fdim = model.config.feature_dim;
        let mut s0 = Vec::with_capacity(b * fdim);
        let mut st = Vec::with_capacity(b * fdim);
        for s in chunk {
            s0.extend_from_slice(&s.s0);
            st.extend_from_slice(&s.st);
        }
        let s0 = g.input(&s0, b, fdim)?;
        let st = g.input(&st, b, fdim)?;
        let pass = model.forward(&mut g, &bind, feats, s0, st, t, None, None)?;
        let logits = g.value(pass.step_logits);
        let mids = g.value(pass.mid_states);
        for (i, _) in chunk.iter().enumerate() {
            let emissions: Vec<Vec<f64>> = (0..t)
                .map(|r| softmax_f64(&logits[(i * t + r) * c..(i * t + r + 1) * c]))
                .collect();
            let mid_states: Vec<Vec<f32>> = (0..t - 1)
                .map(|r| mids[(i * (t - 1) + r) * e..(i * (t - 1) + r + 1) * e].to_vec())
                .collect();
            out.push(decode_one(
                chunk_idx * PLAN_CHUNK + i,
                emissions,
                mid_states,
                mode,
                transition,
            )?);
        }
    }
    Ok(out)
}

/// Draws `n` noisy plans for one sample (the probabilistic variant): one
/// forward pass over `n` copies of the sample, each with its own query
/// noise. Seed-deterministic; `sigma == 0` reproduces the deterministic plan.
#[allow(clippy::too_many_arguments)]
pub fn sample_plans(
    store: &ParamStore<f32>,
    model: &PlannerModel,
    feats: &DescriptionFeatures,
    sample: &ProcedureSample,
    n: usize,
    seed: u64,
    sigma: f64,
    transition: Option<&TransitionModel>,
) -> Result<Vec<PlanResult>, InferenceError> {
    if n == 0 {
        return Err(InferenceError::BadArgument {
            detail: "sample count must be positive".into(),
        });
    }
    let t = sample.steps.len();
    let c = model.config.num_classes;
    let e = model.config.decoder.embed_dim;
    let fdim = model.config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for chunk_start in (0..n).step_by(PLAN_CHUNK) {
        let b = PLAN_CHUNK.min(n - chunk_start);
        let mut g: Graph<f32> = Graph::new();
        let bind = store.bind(&mut g)?;
        let s0: Vec<f32> = sample.s0.iter().copied().cycle().take(b * fdim).collect();
        let st: Vec<f32> = sample.st.iter().copied().cycle().take(b * fdim).collect();
        let s0 = g.input(&s0, b, fdim)?;
        let st = g.input(&st, b, fdim)?;
        let noise = if sigma > 0.0 {
            Some((&mut rng, sigma))
        } else {
            None
        };
        let pass = model.forward(&mut g, &bind, feats, s0, st, t, None, noise)?;
        let logits = g.value(pass.step_logits);
        let mids = g.value(pass.mid_states);
        for i in 0..b {
            let emissions: Vec<Vec<f64>> = (0..t)
                .map(|r| softmax_f64(&logits[(i * t + r) * c..(i * t + r + 1) * c]))
                .collect();
            let mid_states: Vec<Vec<f32>> = (0..t - 1)
                .map(|r| mids[(i * (t - 1) + r) * e..(i * (t - 1) + r + 1) * e].to_vec())
                .collect();
            let mode = if transition.is_some() {
                PlanMode::Viterbi
            } else {
                PlanMode::Prob
            };
            let mut plan = decode_one(chunk_start + i, emissions, mid_states, mode, transition)?;
            plan.mode = PlanMode::Prob;
            out.push(plan);
        }
    }
    Ok(out)
}
