//! Ablation harness: trains matched models over shared seeds with one knob
//! changed at a time and tabulates test metrics per arm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::DescriptionFeatures;
use crate::dataworld::{extract_procedures, generate_world, split_train_test, ProcedureSample, WorldSpec};
use crate::inference::PlanMode;
use crate::planner::{MemorySource, ModelConfig, PlannerModel};
use crate::tensor::ParamStore;
use crate::training::{
    evaluate, fit, transition_from_samples, TrainConfig, TrainError,
};

use super::report::{AblationGrid, AblationRow};

/// Everything one ablation run needs. `world.seed` and `train.seed` are
/// overridden per seed in `seeds`, so every arm sees identical data, identical
/// splits, and identically-seeded initialization at each seed.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Planning horizon for both the training windows and the evaluation.
    pub t: usize,
    pub split_ratio: f64,
    pub config_hash: String,
}

struct TrainedArm {
    store: ParamStore<f32>,
    model: PlannerModel,
    feats: DescriptionFeatures,
    train: Vec<ProcedureSample>,
    test: Vec<ProcedureSample>,
}

fn train_arm(
    spec: &AblationSpec,
    seed: u64,
    mutate: &dyn Fn(&mut ModelConfig, &mut TrainConfig),
) -> Result<TrainedArm, TrainError> {
    let mut wspec = spec.world.clone();
    wspec.seed = seed;
    let world = generate_world(&wspec).map_err(|e| TrainError::BadSample {
        index: 0,
        detail: format!("world generation: {e}"),
    })?;
    let samples = extract_procedures(&world.videos, spec.t).map_err(|e| TrainError::BadSample {
        index: 0,
        detail: format!("window extraction: {e}"),
    })?;
    let split = split_train_test(&samples, spec.split_ratio, seed);

    let mut mconfig = spec.model.clone();
    mconfig.feature_dim = wspec.feature_dim;
    mconfig.num_classes = world.num_classes;
    mconfig.num_tasks = wspec.num_tasks;
    mconfig.k = wspec.descriptions_per_side;
    let mut tconfig = spec.train.clone();
    tconfig.seed = seed;
    tconfig.checkpoint = None;
    mutate(&mut mconfig, &mut tconfig);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let model = PlannerModel::new(&mut store, &mut rng, mconfig)?;
    // Skip per-epoch eval (empty test set) — arms are scored once at the end.
    fit(&mut store, &model, &world.desc_features, &split.train, &[], &tconfig)?;
    Ok(TrainedArm {
        store,
        model,
        feats: world.desc_features,
        train: split.train,
        test: split.test,
    })
}

fn pooled(arm: &TrainedArm, mode: PlanMode) -> Result<(f64, f64, f64), TrainError> {
    let tm = match mode {
        PlanMode::Viterbi => Some(transition_from_samples(
            &arm.train,
            arm.model.config.num_classes,
        )?),
        _ => None,
    };
    let rows = evaluate(&arm.store, &arm.model, &arm.feats, &arm.test, mode, tm.as_ref())?;
    let n: usize = rows.iter().map(|r| r.samples).sum();
    let avg = |f: &dyn Fn(&crate::metrics::HorizonRow) -> f64| {
        rows.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / n as f64
    };
    Ok((avg(&|r| r.sr), avg(&|r| r.macc), avg(&|r| r.miou)))
}

fn seed_mean(
    spec: &AblationSpec,
    arm: &str,
    mode: PlanMode,
    mutate: &dyn Fn(&mut ModelConfig, &mut TrainConfig),
) -> Result<AblationRow, TrainError> {
    let mut sums = (0.0, 0.0, 0.0);
    for &seed in &spec.seeds {
        let trained = train_arm(spec, seed, mutate)?;
        let (sr, macc, miou) = pooled(&trained, mode)?;
        sums.0 += sr;
        sums.1 += macc;
        sums.2 += miou;
    }
    let n = spec.seeds.len() as f64;
    Ok(AblationRow {
        arm: arm.to_string(),
        sr: sums.0 / n,
        macc: sums.1 / n,
        miou: sums.2 / n,
    })
}

fn grid(spec: &AblationSpec, rows: Vec<AblationRow>) -> AblationGrid {
    AblationGrid {
        config_hash: spec.config_hash.clone(),
        seeds: spec.seeds.clone(),
        rows,
    }
}

/// The loss ablation: which of the alignment and mid-state terms are on.
/// Step classification is always trained (there is nothing to decode
/// otherwise); arm (a) is that baseline alone.
pub fn run_loss_ablation(spec: &AblationSpec) -> Result<AblationGrid, TrainError> {
    let arms: [(&str, f64, f64); 4] = [
        ("(a) step only", 0.0, 0.0),
        ("(b) align", 1.0, 0.0),
        ("(c) mid", 0.0, 1.0),
        ("(d) align+mid", 1.0, 1.0),
    ];
    let mut rows = Vec::with_capacity(arms.len());
    for (name, w_align, w_state) in arms {
        rows.push(seed_mean(spec, name, PlanMode::Argmax, &move |_m, t| {
            t.weights.align = w_align;
            t.weights.state = w_state;
        })?);
    }
    Ok(grid(spec, rows))
}

/// Shared decoder stack versus separate state/step decoders.
pub fn run_decoder_ablation(spec: &AblationSpec) -> Result<AblationGrid, TrainError> {
    let rows = vec![
        seed_mean(spec, "one decoder", PlanMode::Argmax, &|m, _t| {
            m.two_decoders = false;
        })?,
        seed_mean(spec, "two decoders", PlanMode::Argmax, &|m, _t| {
            m.two_decoders = true;
        })?,
    ];
    Ok(grid(spec, rows))
}

/// What the decoders cross-attend to: fixed random rows, the state
/// descriptions, or the step descriptions. Losses always use the canonical
/// state-description memory.
pub fn run_memory_ablation(spec: &AblationSpec) -> Result<AblationGrid, TrainError> {
    let arms = [
        ("random memory", MemorySource::Random),
        ("state descriptions", MemorySource::StateDescriptions),
        ("step descriptions", MemorySource::StepDescriptions),
    ];
    let mut rows = Vec::with_capacity(arms.len());
    for (name, source) in arms {
        rows.push(seed_mean(spec, name, PlanMode::Argmax, &move |m, _t| {
            m.memory_source = source;
        })?);
    }
    Ok(grid(spec, rows))
}

/// Argmax versus Viterbi decoding of the same trained models: one training
/// run per seed, scored under both decoders.
pub fn run_decoding_ablation(spec: &AblationSpec) -> Result<AblationGrid, TrainError> {
    let mut sums = [(0.0, 0.0, 0.0); 2];
    for &seed in &spec.seeds {
        let trained = train_arm(spec, seed, &|_m, _t| {})?;
        for (i, mode) in [PlanMode::Argmax, PlanMode::Viterbi].into_iter().enumerate() {
            let (sr, macc, miou) = pooled(&trained, mode)?;
            sums[i].0 += sr;
            sums[i].1 += macc;
            sums[i].2 += miou;
        }
    }
    let n = spec.seeds.len() as f64;
    let rows = ["argmax", "viterbi"]
        .iter()
        .zip(sums)
        .map(|(name, s)| AblationRow {
            arm: (*name).to_string(),
            sr: s.0 / n,
            macc: s.1 / n,
            miou: s.2 / n,
        })
        .collect();
    Ok(grid(spec, rows))
}

#[cfg(test)]
mod tests {
    use crate::planner::DecoderConfig;

    use super::*;

    fn tiny_spec() -> AblationSpec {
        AblationSpec {
            world: WorldSpec {
                num_tasks: 2,
                steps_per_task: 3,
                feature_dim: 8,
                observation_noise_sigma: 0.1,
                videos_per_task: 4,
                branching: 0.0,
                description_noise_sigma: 0.05,
                descriptions_per_side: 2,
                seed: 0,
            },
            model: ModelConfig {
                max_horizon: 3,
                decoder: DecoderConfig {
                    blocks: 1,
                    heads: 2,
                    hidden: 16,
                    dropout: 0.1,
                    embed_dim: 16,
                },
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2],
            t: 2,
            split_ratio: 0.7,
            config_hash: "testhash".into(),
        }
    }

    fn check_grid(grid: &AblationGrid, names: &[&str]) {
        assert_eq!(grid.config_hash, "testhash");
        assert_eq!(grid.seeds, vec![1, 2]);
        let got: Vec<&str> = grid.rows.iter().map(|r| r.arm.as_str()).collect();
        assert_eq!(got, names);
        for row in &grid.rows {
            for v in [row.sr, row.macc, row.miou] {
                assert!((0.0..=100.0).contains(&v), "{}: {v}", row.arm);
            }
        }
    }

    #[test]
    fn loss_ablation_runs_all_four_arms() {
        let spec = tiny_spec();
        let grid = run_loss_ablation(&spec).unwrap();
        check_grid(
            &grid,
            &["(a) step only", "(b) align", "(c) mid", "(d) align+mid"],
        );
        // Shared seeds mean a rerun reproduces the numbers exactly.
        let again = run_loss_ablation(&spec).unwrap();
        for (a, b) in grid.rows.iter().zip(&again.rows) {
            assert_eq!(a.sr.to_bits(), b.sr.to_bits());
            assert_eq!(a.miou.to_bits(), b.miou.to_bits());
        }
        assert!(grid.to_markdown().contains("| arm | SR | mAcc | mIoU |"));
    }

    #[test]
    fn decoder_and_memory_ablations_run() {
        let spec = tiny_spec();
        let grid = run_decoder_ablation(&spec).unwrap();
        check_grid(&grid, &["one decoder", "two decoders"]);
        let grid = run_memory_ablation(&spec).unwrap();
        check_grid(
            &grid,
            &["random memory", "state descriptions", "step descriptions"],
        );
    }

    #[test]
    fn decoding_ablation_scores_both_decoders_per_seed() {
        let spec = tiny_spec();
        let grid = run_decoding_ablation(&spec).unwrap();
        check_grid(&grid, &["argmax", "viterbi"]);
    }
}
