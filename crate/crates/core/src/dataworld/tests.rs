use std::collections::HashSet;

use crate::corpus::StateSide;

use super::*;

fn spec() -> WorldSpec {
    WorldSpec {
        num_tasks: 6,
        steps_per_task: 4,
        feature_dim: 32,
        observation_noise_sigma: 0.1,
        videos_per_task: 10,
        branching: 0.0,
        description_noise_sigma: 0.05,
        descriptions_per_side: 3,
        seed: 7,
    }
}

fn toy_video(id: usize, task: usize, steps: Vec<usize>, dim: usize) -> Video {
    let obs = |salt: usize| -> Vec<Vec<f32>> {
        steps
            .iter()
            .enumerate()
            .map(|(i, &s)| (0..dim).map(|d| (s * 100 + i * 10 + salt + d) as f32).collect())
            .collect()
    };
    Video {
        id,
        task,
        start_obs: obs(0),
        end_obs: obs(1),
        steps,
    }
}

#[test]
fn world_generation_is_deterministic() {
    let a = generate_world(&spec()).unwrap();
    let b = generate_world(&spec()).unwrap();
    assert_eq!(a.num_classes, b.num_classes);
    assert_eq!(a.before, b.before);
    assert_eq!(a.after, b.after);
    assert_eq!(a.orderings, b.orderings);
    assert_eq!(a.videos.len(), b.videos.len());
    for (va, vb) in a.videos.iter().zip(&b.videos) {
        assert_eq!(va.steps, vb.steps);
        assert_eq!(va.start_obs, vb.start_obs);
        assert_eq!(va.end_obs, vb.end_obs);
    }
}

#[test]
fn world_shapes_and_chain_consistency() {
    let w = generate_world(&spec()).unwrap();
    assert_eq!(w.num_classes, 24);
    assert_eq!(w.before.len(), 24);
    assert_eq!(w.after.len(), 24);
    assert_eq!(w.videos.len(), 60);
    // Without branching every task has exactly its canonical ordering, and
    // consecutive steps share a latent state bit-for-bit.
    for (task, orders) in w.orderings.iter().enumerate() {
        assert_eq!(orders.len(), 1);
        let chain = &orders[0];
        assert_eq!(*chain, (task * 4..task * 4 + 4).collect::<Vec<_>>());
        for pair in chain.windows(2) {
            assert_eq!(w.after[pair[0]], w.before[pair[1]]);
        }
    }
    for v in &w.videos {
        for (i, &class) in v.steps.iter().enumerate() {
            assert_eq!(class, v.task * 4 + i);
        }
    }
}

#[test]
fn latent_states_are_unit_norm_and_distinct() {
    let w = generate_world(&spec()).unwrap();
    let mut seen: Vec<&Vec<f32>> = Vec::new();
    for v in w.before.iter().chain(&w.after) {
        let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    // 6 tasks x 5 state slots, no collapse.
    assert_eq!(seen.len(), 30);
}

#[test]
fn zero_noise_observations_equal_latents() {
    let mut s = spec();
    s.observation_noise_sigma = 0.0;
    let w = generate_world(&s).unwrap();
    for v in &w.videos {
        for (i, &class) in v.steps.iter().enumerate() {
            assert_eq!(v.start_obs[i], w.before[class]);
            assert_eq!(v.end_obs[i], w.after[class]);
        }
    }
}

#[test]
fn zero_desc_noise_features_equal_latents() {
    let mut s = spec();
    s.description_noise_sigma = 0.0;
    let w = generate_world(&s).unwrap();
    assert!(w.corpus.violations().is_empty());
    assert_eq!(w.corpus.num_classes(), w.num_classes);
    assert_eq!(w.desc_features.num_state_rows(), 2 * 24 * 3);
    let dim = s.feature_dim;
    for class in 0..w.num_classes {
        for j in 0..3 {
            let rb = w.desc_features.row(class, StateSide::Before, j);
            assert_eq!(&w.desc_features.state_rows[rb * dim..(rb + 1) * dim], &w.before[class][..]);
            let ra = w.desc_features.row(class, StateSide::After, j);
            assert_eq!(&w.desc_features.state_rows[ra * dim..(ra + 1) * dim], &w.after[class][..]);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec();
    s.num_tasks = 0;
    assert!(matches!(
        generate_world(&s),
        Err(DataError::InvalidSpec { field: "num_tasks", .. })
    ));
    let mut s = spec();
    s.observation_noise_sigma = -1.0;
    assert!(generate_world(&s).is_err());
    let mut s = spec();
    s.branching = 1.5;
    assert!(generate_world(&s).is_err());
}

#[test]
fn window_extraction_counts_and_contents() {
    let dim = 4;
    let videos = vec![
        toy_video(0, 0, vec![0, 1, 2, 3, 4], dim),
        toy_video(1, 1, vec![5, 6], dim),
    ];
    let samples = extract_procedures(&videos, 3).unwrap();
    // 5 steps -> 3 windows; 2 steps -> none.
    assert_eq!(samples.len(), 3);
    for (o, s) in samples.iter().enumerate() {
        assert_eq!(s.video_id, 0);
        assert_eq!(s.offset, o);
        assert_eq!(s.steps, (o..o + 3).collect::<Vec<_>>());
        assert_eq!(s.s0, videos[0].start_obs[o]);
        assert_eq!(s.st, videos[0].end_obs[o + 2]);
    }
    assert!(matches!(extract_procedures(&videos, 0), Err(DataError::BadHorizon(0))));
    // t == 1: one sample per step, used by step classification.
    assert_eq!(extract_procedures(&videos, 1).unwrap().len(), 7);
}

#[test]
fn window_density_matches_instructional_footage() {
    // Long-horizon corpora average ~6.5 windows per video at t = 4; a 50/50
    // mix of 9- and 10-step videos lands exactly there.
    let dim = 2;
    let videos: Vec<Video> = (0..20)
        .map(|i| toy_video(i, i % 2, (0..9 + i % 2).collect(), dim))
        .collect();
    let samples = extract_procedures(&videos, 4).unwrap();
    let per_video = samples.len() as f64 / videos.len() as f64;
    assert!((per_video - 6.5).abs() / 6.5 < 0.10, "got {per_video}");
}

#[test]
fn split_is_stratified_disjoint_and_deterministic() {
    let w = generate_world(&spec()).unwrap();
    let samples = extract_procedures(&w.videos, 3).unwrap();
    let split = split_train_test(&samples, 0.7, 11);
    assert!(split.warnings.is_empty());
    assert_eq!(split.train.len() + split.test.len(), samples.len());

    let vids = |part: &[ProcedureSample]| -> HashSet<usize> {
        part.iter().map(|s| s.video_id).collect()
    };
    let (train_v, test_v) = (vids(&split.train), vids(&split.test));
    assert!(train_v.is_disjoint(&test_v));
    // 10 videos per task at 0.7 -> 7 train / 3 test for every task.
    for task in 0..6 {
        let t_train = split.train.iter().filter(|s| s.task == task).map(|s| s.video_id).collect::<HashSet<_>>();
        let t_test = split.test.iter().filter(|s| s.task == task).map(|s| s.video_id).collect::<HashSet<_>>();
        assert_eq!(t_train.len(), 7, "task {task}");
        assert_eq!(t_test.len(), 3, "task {task}");
    }

    let again = split_train_test(&samples, 0.7, 11);
    assert_eq!(split.train, again.train);
    assert_eq!(split.test, again.test);
    let other = split_train_test(&samples, 0.7, 12);
    assert_ne!(vids(&split.train), vids(&other.train));
}

#[test]
fn split_warns_on_single_video_tasks() {
    let dim = 3;
    let videos = vec![
        toy_video(0, 0, vec![0, 1, 2], dim),
        toy_video(1, 0, vec![0, 1, 2], dim),
        toy_video(2, 3, vec![9, 10, 11], dim),
    ];
    let samples = extract_procedures(&videos, 3).unwrap();
    let split = split_train_test(&samples, 0.7, 0);
    assert_eq!(split.warnings, vec!["task 3 has 1 video(s); keeping all in train".to_string()]);
    assert!(split.train.iter().any(|s| s.video_id == 2));
    assert!(split.test.iter().all(|s| s.video_id != 2));
}

#[test]
fn epoch_batches_cover_everything() {
    let batches = epoch_batches(10, 4, 5, 0);
    assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    let mut all: Vec<usize> = batches.concat();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());

    assert_eq!(epoch_batches(10, 4, 5, 0), batches);
    assert_ne!(epoch_batches(10, 4, 5, 1), batches);
    assert_eq!(epoch_batches(0, 4, 5, 0).len(), 0);
}

#[test]
fn branching_yields_two_consistent_orderings() {
    let mut s = spec();
    s.num_tasks = 3;
    s.branching = 1.0;
    let w = generate_world(&s).unwrap();
    for (task, orders) in w.orderings.iter().enumerate() {
        assert_eq!(orders.len(), 2, "task {task}");
        let (chain, alt) = (&orders[0], &orders[1]);
        // The alternate ordering is the canonical one with one adjacent swap.
        let t = (0..chain.len() - 1)
            .find(|&i| chain[i] != alt[i])
            .expect("orderings differ");
        assert_eq!(alt[t], chain[t + 1]);
        assert_eq!(alt[t + 1], chain[t]);
        assert_eq!(alt[..t], chain[..t]);
        assert_eq!(alt[t + 2..], chain[t + 2..]);
        // Both orderings are exact chains.
        for order in orders {
            for pair in order.windows(2) {
                assert_eq!(w.after[pair[0]], w.before[pair[1]]);
            }
        }
        // The swapped steps collapse onto a single latent: both are no-ops on
        // the state, which is what makes the two orderings indistinguishable
        // from the endpoints alone.
        assert_eq!(w.before[chain[t]], w.after[chain[t]]);
        assert_eq!(w.before[chain[t + 1]], w.after[chain[t + 1]]);
        assert_eq!(w.before[chain[t]], w.before[chain[t + 1]]);
    }
    // Videos demonstrate both orderings somewhere.
    let demonstrated: HashSet<Vec<usize>> = w.videos.iter().map(|v| v.steps.clone()).collect();
    assert!(demonstrated.len() > s.num_tasks, "only canonical orderings shown");
}

#[test]
fn valid_chain_windows_and_mode_contexts() {
    let mut s = spec();
    s.num_tasks = 2;
    s.branching = 1.0;
    let w = generate_world(&s).unwrap();
    let windows = w.valid_chain_windows(3);
    for orders in &w.orderings {
        for order in orders {
            for win in order.windows(3) {
                assert!(windows.contains(win));
            }
        }
    }

    let contexts = w.mode_contexts(2);
    // 4 steps -> 3 offsets per task.
    assert_eq!(contexts.len(), 6);
    for ctx in &contexts {
        let total: f64 = ctx.modes.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let chain = &w.orderings[ctx.task][0];
        let t = (0..chain.len() - 1)
            .find(|&i| chain[i] != w.orderings[ctx.task][1][i])
            .unwrap();
        if ctx.offset == t {
            // Window exactly covering the swap: two modes at 1/2.
            assert_eq!(ctx.modes.len(), 2, "offset {t}");
            assert!(ctx.modes.iter().all(|(_, p)| (p - 0.5).abs() < 1e-12));
            let seqs: HashSet<&Vec<usize>> = ctx.modes.iter().map(|(s, _)| s).collect();
            assert!(seqs.contains(&vec![chain[t], chain[t + 1]]));
            assert!(seqs.contains(&vec![chain[t + 1], chain[t]]));
        }
    }
    // Windows longer than any ordering yield nothing.
    assert!(w.mode_contexts(5).is_empty());
    assert!(w.valid_chain_windows(5).is_empty());
}

#[test]
fn feature_export_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.features.json");
    let w = generate_world(&spec()).unwrap();
    export_features(&w.videos, 32, "demo", &path).unwrap();
    assert!(dir.path().join("demo.features.bin").exists());

    let videos = ingest_features(&path, Some(32)).unwrap();
    assert_eq!(videos.len(), w.videos.len());
    for (a, b) in videos.iter().zip(&w.videos) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.task, b.task);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.start_obs, b.start_obs);
        assert_eq!(a.end_obs, b.end_obs);
    }
}

#[test]
fn ingest_rejects_bad_dims_and_dangling_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    let videos = vec![toy_video(0, 0, vec![0, 1], 8)];
    export_features(&videos, 8, "w", &path).unwrap();

    let err = ingest_features(&path, Some(16)).unwrap_err();
    assert_eq!(err.to_string(), "feature dim mismatch: expected 16, got 8");

    // Truncate the blob so the last vector dangles.
    let blob = dir.path().join("w.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let err = ingest_features(&path, None).unwrap_err();
    match &err {
        DataError::DanglingRef { video, step, .. } => {
            assert_eq!(*video, 0);
            assert_eq!(*step, 1);
        }
        other => panic!("expected DanglingRef, got {other:?}"),
    }
    assert!(err.to_string().contains("exceeds blob size"));

    // Export refuses vectors whose width disagrees with the declared dim.
    let err = export_features(&videos, 9, "w", &path).unwrap_err();
    assert_eq!(err.to_string(), "feature dim mismatch: expected 9, got 8");
}

#[test]
fn dataset_assembles_from_world() {
    let w = generate_world(&spec()).unwrap();
    let samples = extract_procedures(&w.videos, 3).unwrap();
    let ds = Dataset {
        feature_dim: w.spec.feature_dim,
        num_classes: w.num_classes,
        num_tasks: w.spec.num_tasks,
        samples,
    };
    // 4-step videos at t = 3 -> 2 windows each.
    assert_eq!(ds.samples.len(), w.videos.len() * 2);
    for s in &ds.samples {
        assert_eq!(s.s0.len(), ds.feature_dim);
        assert_eq!(s.st.len(), ds.feature_dim);
        assert!(s.steps.iter().all(|&c| c < ds.num_classes));
    }
}
