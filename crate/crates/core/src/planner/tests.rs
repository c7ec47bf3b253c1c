use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DescriptionFeatures;
use crate::tensor::gradcheck::{finite_diff_check, GradCheckOptions};
use crate::tensor::{Graph, ParamStore, Real, TensorId};

use super::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        num_classes: 4,
        num_tasks: 2,
        k: 2,
        max_horizon: 6,
        decoder: DecoderConfig {
            blocks: 1,
            heads: 2,
            hidden: 8,
            dropout: 0.2,
            embed_dim: 8,
        },
        ..ModelConfig::default()
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn random_features(rng: &mut ChaCha8Rng, c: usize, k: usize, dim: usize) -> DescriptionFeatures {
    DescriptionFeatures {
        c,
        k,
        dim,
        state_rows: random_vec(rng, 2 * c * k * dim),
        step_rows: random_vec(rng, c * dim),
    }
}

struct Fixture {
    store: ParamStore<f32>,
    model: PlannerModel,
    feats: DescriptionFeatures,
}

fn fixture(config: ModelConfig, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let model = PlannerModel::new(&mut store, &mut rng, config.clone()).unwrap();
    let feats = random_features(&mut rng, config.num_classes, config.k, config.desc_dim());
    Fixture {
        store,
        model,
        feats,
    }
}

fn run_forward(
    fx: &Fixture,
    batch: usize,
    t: usize,
    tasks: Option<&[usize]>,
    seed: u64,
) -> (Graph<f32>, ForwardPass) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let bind = fx.store.bind(&mut g).unwrap();
    let fdim = fx.model.config.feature_dim;
    let s0 = random_vec(&mut rng, batch * fdim);
    let st = random_vec(&mut rng, batch * fdim);
    let s0 = g.input(&s0, batch, fdim).unwrap();
    let st = g.input(&st, batch, fdim).unwrap();
    let pass = fx
        .model
        .forward(&mut g, &bind, &fx.feats, s0, st, t, tasks, None)
        .unwrap();
    (g, pass)
}

#[test]
fn config_validation_catches_bad_shapes() {
    let mut bad = tiny_config();
    bad.decoder.heads = 3; // 8 % 3 != 0
    assert!(bad.validate().is_err());

    let mut bad = tiny_config();
    bad.decoder.dropout = 1.0;
    assert!(bad.validate().is_err());

    let mut bad = tiny_config();
    bad.num_classes = 0;
    let err = bad.validate().unwrap_err();
    assert!(err.to_string().contains("num_classes"), "{err}");

    assert!(tiny_config().validate().is_ok());
}

#[test]
fn forward_shapes_follow_the_horizon() {
    let fx = fixture(tiny_config(), 1);
    for t in [2usize, 3, 4] {
        let (g, pass) = run_forward(&fx, 3, t, None, 10 + t as u64);
        assert_eq!(g.shape(pass.mid_states), (3 * (t - 1), 8), "t={t}");
        assert_eq!(g.shape(pass.step_embeddings), (3 * t, 8));
        assert_eq!(g.shape(pass.step_logits), (3 * t, 4));
        assert_eq!(g.shape(pass.task_logits.unwrap()), (3, 2));
        assert_eq!(pass.task_ids.as_ref().unwrap().len(), 3);
        assert_eq!(g.shape(pass.state_memory), (2 * 4 * 2, 8));
    }
}

#[test]
fn emission_rows_are_distributions() {
    let fx = fixture(tiny_config(), 2);
    let (mut g, pass) = run_forward(&fx, 2, 3, None, 20);
    let probs = g.softmax_rows(pass.step_logits).unwrap();
    let (rows, cols) = g.shape(probs);
    for r in 0..rows {
        let s: f32 = g.value(probs)[r * cols..(r + 1) * cols].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn horizon_bounds_are_enforced() {
    let fx = fixture(tiny_config(), 3);
    let mut g = Graph::new();
    let bind = fx.store.bind(&mut g).unwrap();
    let x = g.input(&[0.1; 12], 2, 6).unwrap();
    let err = fx
        .model
        .forward(&mut g, &bind, &fx.feats, x, x, 1, None, None)
        .unwrap_err();
    assert!(err.to_string().contains("horizon must be >= 2"), "{err}");
    let err = fx
        .model
        .forward(&mut g, &bind, &fx.feats, x, x, 7, None, None)
        .unwrap_err();
    assert!(err.to_string().contains("exceeds max_horizon"), "{err}");
}

#[test]
fn eval_forward_is_deterministic() {
    let fx = fixture(tiny_config(), 4);
    let (g1, p1) = run_forward(&fx, 3, 3, None, 30);
    let (g2, p2) = run_forward(&fx, 3, 3, None, 30);
    assert_eq!(g1.value(p1.step_logits), g2.value(p2.step_logits));
    assert_eq!(g1.value(p1.mid_states), g2.value(p2.mid_states));
    assert_eq!(p1.task_ids, p2.task_ids);
}

#[test]
fn memory_permutation_invariance() {
    let fx = fixture(tiny_config(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut g = Graph::new();
    let bind = fx.store.bind(&mut g).unwrap();
    let (batch, t) = (2, 3);
    let s0 = random_vec(&mut rng, batch * 6);
    let st = random_vec(&mut rng, batch * 6);
    let s0 = g.input(&s0, batch, 6).unwrap();
    let st = g.input(&st, batch, 6).unwrap();
    let s0e = fx.model.state_encoder.encode(&mut g, &bind, s0).unwrap();
    let ste = fx.model.state_encoder.encode(&mut g, &bind, st).unwrap();
    let mem = fx
        .model
        .desc_encoder
        .encode_memory(&mut g, &bind, &fx.feats)
        .unwrap();
    let q_s = fx
        .model
        .build_state_query(&mut g, &bind, s0e, ste, t, &[])
        .unwrap();

    let mid = fx
        .model
        .decode_states(&mut g, &bind, q_s, mem, batch, t)
        .unwrap();
    // Reverse the memory rows: cross-attention must not care.
    let rows = g.shape(mem).0;
    let perm: Vec<usize> = (0..rows).rev().collect();
    let mem_rev = g.gather_rows(mem, &perm).unwrap();
    let mid_rev = fx
        .model
        .decode_states(&mut g, &bind, q_s, mem_rev, batch, t)
        .unwrap();
    for (a, b) in g.value(mid).iter().zip(g.value(mid_rev)) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    let q_a = fx
        .model
        .build_step_query(&mut g, &bind, s0e, ste, mid, t, &[])
        .unwrap();
    let emb = fx
        .model
        .decode_steps(&mut g, &bind, q_a, mem, batch, t)
        .unwrap();
    let emb_rev = fx
        .model
        .decode_steps(&mut g, &bind, q_a, mem_rev, batch, t)
        .unwrap();
    for (a, b) in g.value(emb).iter().zip(g.value(emb_rev)) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn mid_states_are_live_inputs_to_the_step_decoder() {
    let fx = fixture(tiny_config(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut g = Graph::new();
    let bind = fx.store.bind(&mut g).unwrap();
    let (batch, t) = (2, 3);
    let s0 = random_vec(&mut rng, batch * 6);
    let st = random_vec(&mut rng, batch * 6);
    let s0 = g.input(&s0, batch, 6).unwrap();
    let st = g.input(&st, batch, 6).unwrap();
    let s0e = fx.model.state_encoder.encode(&mut g, &bind, s0).unwrap();
    let ste = fx.model.state_encoder.encode(&mut g, &bind, st).unwrap();
    let mem = fx
        .model
        .desc_encoder
        .encode_memory(&mut g, &bind, &fx.feats)
        .unwrap();
    let q_s = fx
        .model
        .build_state_query(&mut g, &bind, s0e, ste, t, &[])
        .unwrap();
    let mid = fx
        .model
        .decode_states(&mut g, &bind, q_s, mem, batch, t)
        .unwrap();
    let zeros = g
        .input(&vec![0.0f32; batch * (t - 1) * 8], batch * (t - 1), 8)
        .unwrap();

    let q_live = fx
        .model
        .build_step_query(&mut g, &bind, s0e, ste, mid, t, &[])
        .unwrap();
    let q_dead = fx
        .model
        .build_step_query(&mut g, &bind, s0e, ste, zeros, t, &[])
        .unwrap();
    let out_live = fx
        .model
        .decode_steps(&mut g, &bind, q_live, mem, batch, t)
        .unwrap();
    let out_dead = fx
        .model
        .decode_steps(&mut g, &bind, q_dead, mem, batch, t)
        .unwrap();
    assert_ne!(g.value(out_live), g.value(out_dead));
}

#[test]
fn task_feature_teacher_forcing_and_argmax() {
    let fx = fixture(tiny_config(), 7);
    // Training without labels is an error.
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut g = Graph::new();
    g.set_training(true);
    let bind = fx.store.bind(&mut g).unwrap();
    let x = random_vec(&mut rng, 2 * 6);
    let s0 = g.input(&x, 2, 6).unwrap();
    let err = fx
        .model
        .forward(&mut g, &bind, &fx.feats, s0, s0, 3, None, None)
        .unwrap_err();
    assert!(
        err.to_string().contains("ground-truth task labels"),
        "{err}"
    );

    // Teacher forcing echoes the labels; inference argmaxes the logits.
    let (_, forced) = run_forward(&fx, 2, 3, Some(&[1, 0]), 71);
    assert_eq!(forced.task_ids, Some(vec![1, 0]));
    let (g, free) = run_forward(&fx, 2, 3, None, 71);
    let logits = g.value(free.task_logits.unwrap());
    let want: Vec<usize> = (0..2)
        .map(|r| if logits[2 * r] >= logits[2 * r + 1] { 0 } else { 1 })
        .collect();
    assert_eq!(free.task_ids, Some(want));

    // Wrong label count.
    let mut g = Graph::new();
    let bind = fx.store.bind(&mut g).unwrap();
    let s0 = g.input(&x, 2, 6).unwrap();
    let err = fx
        .model
        .forward(&mut g, &bind, &fx.feats, s0, s0, 3, Some(&[0]), None)
        .unwrap_err();
    assert!(err.to_string().contains("1 labels for batch 2"), "{err}");
}

#[test]
fn disabling_the_task_feature_removes_its_parameters() {
    let with = fixture(tiny_config(), 8);
    let mut cfg = tiny_config();
    cfg.use_task_feature = false;
    let without = fixture(cfg, 8);
    assert!(without.store.num_scalars() < with.store.num_scalars());
    assert!(without.store.lookup("task.table").is_none());
    let (_, pass) = run_forward(&without, 2, 3, None, 80);
    assert!(pass.task_logits.is_none());
    assert!(pass.task_ids.is_none());
}

#[test]
fn one_decoder_arm_shares_the_stack() {
    let two = fixture(tiny_config(), 9);
    let mut cfg = tiny_config();
    cfg.two_decoders = false;
    let one = fixture(cfg, 9);
    assert!(one.store.num_scalars() < two.store.num_scalars());
    assert!(one.store.lookup("dec_step.block0.self.wq").is_none());
    assert!(one.store.lookup("dec_state.block0.self.wq").is_some());
    let (g, pass) = run_forward(&one, 2, 3, None, 90);
    assert_eq!(g.shape(pass.step_logits), (6, 4));
}

#[test]
fn memory_source_arms() {
    let state = fixture(tiny_config(), 11);
    let (g, pass) = run_forward(&state, 2, 3, None, 110);
    assert_eq!(pass.memory, pass.state_memory);
    drop(g);

    let mut cfg = tiny_config();
    cfg.memory_source = MemorySource::StepDescriptions;
    let step = fixture(cfg, 11);
    let (g, pass) = run_forward(&step, 2, 3, None, 110);
    assert_eq!(g.shape(pass.memory), (4, 8)); // C rows
    assert_ne!(pass.memory, pass.state_memory);
    drop(g);

    let mut cfg = tiny_config();
    cfg.memory_source = MemorySource::Random;
    let rand_arm = fixture(cfg, 11);
    let (g, pass) = run_forward(&rand_arm, 2, 3, None, 110);
    assert_eq!(g.shape(pass.memory), (16, 8)); // 2CK rows
    for r in 0..16 {
        let row = &g.value(pass.memory)[r * 8..(r + 1) * 8];
        let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    // Fixed across forwards: the same rows every time.
    let (g2, pass2) = run_forward(&rand_arm, 2, 3, None, 111);
    assert_eq!(g.value(pass.memory), g2.value(pass2.memory));
}

#[test]
fn probabilistic_noise_perturbs_outputs_deterministically() {
    let fx = fixture(tiny_config(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let x = random_vec(&mut rng, 2 * 6);

    let run = |noise_seed: Option<u64>| -> Vec<f32> {
        let mut g = Graph::new();
        let bind = fx.store.bind(&mut g).unwrap();
        let s0 = g.input(&x, 2, 6).unwrap();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed.unwrap_or(0));
        let noise = noise_seed.map(|_| (&mut noise_rng, 0.5));
        let pass = fx
            .model
            .forward(&mut g, &bind, &fx.feats, s0, s0, 3, None, noise)
            .unwrap();
        g.value(pass.step_logits).to_vec()
    };

    let clean = run(None);
    let noisy_a = run(Some(7));
    let noisy_b = run(Some(7));
    let noisy_c = run(Some(8));
    assert_ne!(clean, noisy_a, "noise must perturb the logits");
    assert_eq!(noisy_a, noisy_b, "same seed, same noise");
    assert_ne!(noisy_a, noisy_c, "different seed, different noise");
}

#[test]
fn planner_gradcheck_tiny() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let cfg = ModelConfig {
        feature_dim: 4,
        num_classes: 3,
        num_tasks: 2,
        k: 1,
        max_horizon: 4,
        decoder: DecoderConfig {
            blocks: 1,
            heads: 2,
            hidden: 5,
            dropout: 0.1,
            embed_dim: 6,
        },
        ..ModelConfig::default()
    };
    let model = PlannerModel::new(&mut store, &mut rng, cfg.clone()).unwrap();
    let feats = {
        let f32s = random_features(&mut rng, 3, 1, 4);
        f32s
    };
    let (batch, t) = (2usize, 2usize);
    let s0: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let st: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = [0usize, 2, 1, 0];
    let tasks = [1usize, 0];
    let wmid: Vec<f64> = (0..batch * (t - 1) * 6).map(|i| 0.1 + 0.03 * i as f64).collect();

    let report = finite_diff_check(&mut store, &GradCheckOptions {
        per_param_limit: Some(4),
        ..GradCheckOptions::default()
    }, |g, bind| {
        g.set_training(true);
        let s0 = g.input(&s0, batch, 4)?;
        let st = g.input(&st, batch, 4)?;
        let pass = model.forward(g, bind, &feats, s0, st, t, Some(&tasks), None)?;
        let ce = g.cross_entropy_mean(pass.step_logits, &labels[..batch * t])?;
        let tce = g.cross_entropy_mean(pass.task_logits.unwrap(), &tasks)?;
        let w = g.input(&wmid, batch * (t - 1), 6)?;
        let m = g.mul(pass.mid_states, w)?;
        let m = g.sum_all(m)?;
        let s = g.add(ce, tce)?;
        g.add(s, m)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert!(report.elements_checked > 50);
}

fn value_of<E: Real>(g: &Graph<E>, id: TensorId) -> Vec<f64> {
    g.value(id).iter().map(|x| x.to_f64()).collect()
}

#[test]
fn single_class_softmax_is_one() {
    let mut cfg = tiny_config();
    cfg.num_classes = 1;
    cfg.k = 1;
    let fx = fixture(cfg, 14);
    let (mut g, pass) = run_forward(&fx, 2, 3, None, 140);
    let probs = g.softmax_rows(pass.step_logits).unwrap();
    for &p in value_of(&g, probs).iter() {
        assert!((p - 1.0).abs() < 1e-9);
    }
}
