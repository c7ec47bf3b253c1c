//! Evaluation protocols: sequence metrics (success rate, mean accuracy, mean
//! IoU), distributional mode metrics for probabilistic planning, and the
//! zero-shot state-based step classification probe.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::StateSide;
use crate::encoders::{EncodedMemory, EncoderError};

pub mod ablate;
mod report;
#[cfg(test)]
mod tests;

pub use ablate::{
    run_decoder_ablation, run_decoding_ablation, run_loss_ablation, run_memory_ablation,
    AblationSpec,
};
pub use report::{AblationGrid, AblationRow, EvalReport, HorizonRow, ModeReport};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("pair {index}: prediction length {pred} != ground truth length {gt}")]
    LengthMismatch {
        index: usize,
        pred: usize,
        gt: usize,
    },
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

fn check_pairs(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<(), MetricsError> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(MetricsError::Empty {
            what: "prediction batch",
        });
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(MetricsError::LengthMismatch {
                index: i,
                pred: p.len(),
                gt: g.len(),
            });
        }
    }
    Ok(())
}

/// Percent of samples whose full sequence matches positionally.
pub fn success_rate(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64, MetricsError> {
    check_pairs(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Positionwise accuracy, averaged over positions then samples, in percent.
pub fn mean_accuracy(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64, MetricsError> {
    check_pairs(preds, gts)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let hits = p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += hits as f64 / p.len() as f64;
    }
    Ok(100.0 * total / preds.len() as f64)
}

/// Set IoU per sample (duplicates collapse), averaged, in percent.
pub fn mean_iou(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64, MetricsError> {
    check_pairs(preds, gts)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let ps: BTreeSet<usize> = p.iter().copied().collect();
        let gs: BTreeSet<usize> = g.iter().copied().collect();
        let inter = ps.intersection(&gs).count() as f64;
        let union = ps.union(&gs).count() as f64;
        total += inter / union;
    }
    Ok(100.0 * total / preds.len() as f64)
}

/// All three sequence metrics over one batch.
pub fn sequence_metrics(
    preds: &[Vec<usize>],
    gts: &[Vec<usize>],
) -> Result<(f64, f64, f64), MetricsError> {
    Ok((
        success_rate(preds, gts)?,
        mean_accuracy(preds, gts)?,
        mean_iou(preds, gts)?,
    ))
}

/// One (start, goal) context: the ground-truth plan distribution and the
/// plans sampled from the model for that context.
#[derive(Debug, Clone)]
pub struct ModeEval {
    /// Distinct ground-truth sequences with their probabilities (sum 1).
    pub gt_modes: Vec<(Vec<usize>, f64)>,
    pub samples: Vec<Vec<usize>>,
}

/// Smoothing floor for empirical distributions.
pub const MODE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeScores {
    pub kl_div: f64,
    pub nll: f64,
    /// Percent of sampled plans equal to some ground-truth mode.
    pub mode_precision: f64,
    /// Percent of ground-truth modes hit by at least one sample.
    pub mode_recall: f64,
}

/// Uncertainty metrics over a set of contexts.
///
/// Per context, the sampled plans form an empirical distribution Q and the
/// ground-truth modes a distribution P; KL(P‖Q) is computed over the union
/// support with `MODE_EPS` additive smoothing and averaged across contexts.
/// NLL is the mean over ground-truth modes of −ln(empirical sample
/// probability, floored at `MODE_EPS`). Precision/recall count exact sequence
/// matches.
pub fn mode_metrics(contexts: &[ModeEval]) -> Result<ModeScores, MetricsError> {
    if contexts.is_empty() {
        return Err(MetricsError::Empty { what: "context set" });
    }
    let mut kl_sum = 0.0;
    let mut nll_sum = 0.0;
    let mut n_modes = 0usize;
    let mut modes_hit = 0usize;
    let mut n_samples = 0usize;
    let mut samples_on_mode = 0usize;
    for ctx in contexts {
        if ctx.samples.is_empty() {
            return Err(MetricsError::Empty { what: "sample set" });
        }
        if ctx.gt_modes.is_empty() {
            return Err(MetricsError::Empty { what: "ground-truth mode set" });
        }
        let n = ctx.samples.len() as f64;
        let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
        for s in &ctx.samples {
            *counts.entry(s.as_slice()).or_default() += 1;
        }

        // Union support for the smoothed KL.
        let mut support: BTreeSet<&[usize]> = counts.keys().copied().collect();
        for (m, _) in &ctx.gt_modes {
            support.insert(m.as_slice());
        }
        let gt_of = |seq: &[usize]| -> f64 {
            ctx.gt_modes
                .iter()
                .find(|(m, _)| m.as_slice() == seq)
                .map_or(0.0, |(_, p)| *p)
        };
        let (mut z_p, mut z_q) = (0.0, 0.0);
        let table: Vec<(f64, f64)> = support
            .iter()
            .map(|seq| {
                let p = gt_of(seq) + MODE_EPS;
                let q = counts.get(seq).map_or(0.0, |&c| c as f64) / n + MODE_EPS;
                z_p += p;
                z_q += q;
                (p, q)
            })
            .collect();
        kl_sum += table
            .iter()
            .map(|(p, q)| {
                let (p, q) = (p / z_p, q / z_q);
                p * (p / q).ln()
            })
            .sum::<f64>();

        for (mode, _) in &ctx.gt_modes {
            n_modes += 1;
            let c = counts.get(mode.as_slice()).copied().unwrap_or(0);
            if c > 0 {
                modes_hit += 1;
            }
            nll_sum += -((c as f64 / n).max(MODE_EPS)).ln();
        }
        n_samples += ctx.samples.len();
        samples_on_mode += ctx
            .samples
            .iter()
            .filter(|s| ctx.gt_modes.iter().any(|(m, _)| m == *s))
            .count();
    }
    Ok(ModeScores {
        kl_div: kl_sum / contexts.len() as f64,
        nll: nll_sum / n_modes as f64,
        mode_precision: 100.0 * samples_on_mode as f64 / n_samples as f64,
        mode_recall: 100.0 * modes_hit as f64 / n_modes as f64,
    })
}

/// Zero-shot step classification from encoded states: predict
/// argmax_i [sim(s0, A_i, before) + sim(sT, A_i, after)]; ties go to the
/// lowest class. Returns accuracy in percent.
pub fn stepcls_zero_shot(
    s0_enc: &[Vec<f32>],
    st_enc: &[Vec<f32>],
    labels: &[usize],
    memory: &EncodedMemory,
) -> Result<f64, MetricsError> {
    if s0_enc.is_empty() || s0_enc.len() != st_enc.len() || s0_enc.len() != labels.len() {
        return Err(MetricsError::Empty {
            what: "step classification batch",
        });
    }
    let mut hits = 0usize;
    for ((s0, st), &label) in s0_enc.iter().zip(st_enc).zip(labels) {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for class in 0..memory.c {
            let score = memory.similarity(s0, class, StateSide::Before)?
                + memory.similarity(st, class, StateSide::After)?;
            if score > best_score {
                best_score = score;
                best = class;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}
