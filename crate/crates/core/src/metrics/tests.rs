use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::EncodedMemory;

use super::*;

fn v(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

#[test]
fn success_rate_fixtures() {
    assert_eq!(success_rate(&[v(&[1, 2, 3])], &[v(&[1, 2, 3])]).unwrap(), 100.0);
    assert_eq!(success_rate(&[v(&[1, 3, 2])], &[v(&[1, 2, 3])]).unwrap(), 0.0);
    let mixed = success_rate(
        &[v(&[1, 2, 3]), v(&[1, 3, 2])],
        &[v(&[1, 2, 3]), v(&[1, 2, 3])],
    )
    .unwrap();
    assert_eq!(mixed, 50.0);
}

#[test]
fn mean_accuracy_fixtures() {
    let one_of_three = mean_accuracy(&[v(&[1, 3, 2])], &[v(&[1, 2, 3])]).unwrap();
    assert!((one_of_three - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!(mean_accuracy(&[v(&[7, 8])], &[v(&[7, 8])]).unwrap(), 100.0);
    assert_eq!(mean_accuracy(&[v(&[0, 0])], &[v(&[7, 8])]).unwrap(), 0.0);
}

#[test]
fn mean_iou_fixtures() {
    // Permutation: same sets.
    assert_eq!(mean_iou(&[v(&[3, 2, 1])], &[v(&[1, 2, 3])]).unwrap(), 100.0);
    let third = mean_iou(&[v(&[1, 2])], &[v(&[1, 3])]).unwrap();
    assert!((third - 100.0 / 3.0).abs() < 1e-9);
    // Duplicates collapse: {1} vs {1,2,3}.
    let dup = mean_iou(&[v(&[1, 1, 1])], &[v(&[1, 2, 3])]).unwrap();
    assert!((dup - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn batch_errors() {
    let err = success_rate(&[v(&[1, 2])], &[v(&[1, 2, 3])]).unwrap_err();
    assert_eq!(
        err.to_string(),
        "pair 0: prediction length 2 != ground truth length 3"
    );
    assert!(success_rate(&[], &[]).is_err());
    assert!(mean_iou(&[v(&[1])], &[]).is_err());
}

#[test]
fn sr_is_a_lower_bound_over_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let t = rng.random_range(1..6);
        let c = rng.random_range(1..8);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..n)
                .map(|_| (0..t).map(|_| rng.random_range(0..c)).collect())
                .collect()
        };
        let preds = sample(&mut rng);
        let gts = sample(&mut rng);
        let (sr, macc, miou) = sequence_metrics(&preds, &gts).unwrap();
        assert!(sr <= macc + 1e-9, "SR {sr} > mAcc {macc}");
        assert!(sr <= miou + 1e-9, "SR {sr} > mIoU {miou}");
        for m in [sr, macc, miou] {
            assert!((0.0..=100.0).contains(&m));
        }
    }
}

#[test]
fn all_metrics_hit_100_only_on_exact_match() {
    let preds = vec![v(&[2, 1]), v(&[0, 3])];
    let (sr, macc, miou) = sequence_metrics(&preds, &preds).unwrap();
    assert_eq!((sr, macc, miou), (100.0, 100.0, 100.0));
    // A permutation keeps mIoU at 100 but drops SR and mAcc.
    let perm = vec![v(&[1, 2]), v(&[3, 0])];
    let (sr, macc, miou) = sequence_metrics(&perm, &preds).unwrap();
    assert_eq!(miou, 100.0);
    assert_eq!(sr, 0.0);
    assert_eq!(macc, 0.0);
}

#[test]
fn mode_metrics_exact_reproduction_is_perfect() {
    // Two contexts; samples exactly reproduce the gt distribution.
    let ctxs = vec![
        ModeEval {
            gt_modes: vec![(v(&[0, 1]), 0.5), (v(&[1, 0]), 0.5)],
            samples: vec![v(&[0, 1]), v(&[1, 0]), v(&[0, 1]), v(&[1, 0])],
        },
        ModeEval {
            gt_modes: vec![(v(&[2, 3]), 1.0)],
            samples: vec![v(&[2, 3]); 8],
        },
    ];
    let s = mode_metrics(&ctxs).unwrap();
    assert_eq!(s.kl_div, 0.0, "same support, same mass");
    assert_eq!(s.mode_precision, 100.0);
    assert_eq!(s.mode_recall, 100.0);

    // Degenerate single-mode case: NLL is exactly 0.
    let single = mode_metrics(&[ModeEval {
        gt_modes: vec![(v(&[4, 5, 6]), 1.0)],
        samples: vec![v(&[4, 5, 6]); 3],
    }])
    .unwrap();
    assert_eq!(single.nll, 0.0);
}

#[test]
fn mode_metrics_count_missing_modes() {
    // Two equiprobable modes, samples cover only one.
    let s = mode_metrics(&[ModeEval {
        gt_modes: vec![(v(&[0, 1]), 0.5), (v(&[1, 0]), 0.5)],
        samples: vec![v(&[0, 1]); 10],
    }])
    .unwrap();
    assert_eq!(s.mode_recall, 50.0);
    assert_eq!(s.mode_precision, 100.0);
    assert!(s.kl_div > 1.0, "missing half the mass: {}", s.kl_div);
    // NLL: mode 1 has p̂=1, mode 2 floored at eps -> -ln(eps)/2.
    let expected = (-(1.0f64).ln() + -(MODE_EPS.ln())) / 2.0;
    assert!((s.nll - expected).abs() < 1e-9);

    // Off-mode samples cut precision.
    let s = mode_metrics(&[ModeEval {
        gt_modes: vec![(v(&[0, 1]), 1.0)],
        samples: vec![v(&[0, 1]), v(&[9, 9]), v(&[0, 1]), v(&[9, 8])],
    }])
    .unwrap();
    assert_eq!(s.mode_precision, 50.0);
    assert_eq!(s.mode_recall, 100.0);
}

#[test]
fn mode_metrics_reject_empty_inputs() {
    assert!(mode_metrics(&[]).is_err());
    let err = mode_metrics(&[ModeEval {
        gt_modes: vec![(v(&[0]), 1.0)],
        samples: vec![],
    }])
    .unwrap_err();
    assert_eq!(err.to_string(), "empty sample set");
}

fn orthogonal_memory(c: usize, k: usize) -> EncodedMemory {
    // Class i's before rows are e_{2i}, after rows e_{2i+1}.
    let dim = 2 * c;
    let mut rows = Vec::new();
    for side in 0..2 {
        for class in 0..c {
            for _ in 0..k {
                let mut r = vec![0.0f32; dim];
                r[2 * class + side] = 1.0;
                rows.extend(r);
            }
        }
    }
    EncodedMemory::new(c, k, dim, rows).unwrap()
}

#[test]
fn stepcls_separable_case_is_perfect() {
    let mem = orthogonal_memory(4, 3);
    let dim = 8;
    let onehot = |i: usize| -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    };
    // Sample for class i: s0 = before direction, sT = after direction.
    let s0: Vec<Vec<f32>> = (0..4).map(|i| onehot(2 * i)).collect();
    let st: Vec<Vec<f32>> = (0..4).map(|i| onehot(2 * i + 1)).collect();
    let labels: Vec<usize> = (0..4).collect();
    assert_eq!(stepcls_zero_shot(&s0, &st, &labels, &mem).unwrap(), 100.0);

    // All-zero states: every class ties at 0; the tie goes to class 0.
    let zero = vec![vec![0.0f32; dim]];
    assert_eq!(
        stepcls_zero_shot(&zero, &zero, &[0], &mem).unwrap(),
        100.0
    );
    assert_eq!(stepcls_zero_shot(&zero, &zero, &[1], &mem).unwrap(), 0.0);

    assert!(stepcls_zero_shot(&[], &[], &[], &mem).is_err());
}

#[test]
fn reports_render_deterministically() {
    let report = EvalReport {
        config_hash: "abc123".into(),
        seed: 7,
        rows: vec![
            HorizonRow {
                t: 3,
                sr: 85.5,
                macc: 90.25,
                miou: 93.0,
                samples: 120,
            },
            HorizonRow {
                t: 4,
                sr: 70.0,
                macc: 80.0,
                miou: 88.5,
                samples: 90,
            },
        ],
    };
    let csv = report.to_csv();
    assert_eq!(csv, report.to_csv());
    assert!(csv.starts_with("config_hash,seed,t,sr,macc,miou,samples\n"));
    assert!(csv.contains("abc123,7,3,85.5000,90.2500,93.0000,120\n"));
    let json = report.to_json();
    assert!(json.contains("\"config_hash\": \"abc123\""));
    assert!(json.ends_with('\n'));

    let grid = AblationGrid {
        config_hash: "abc123".into(),
        seeds: vec![1, 2, 3],
        rows: vec![AblationRow {
            arm: "(d) align+mid".into(),
            sr: 31.83,
            macc: 57.31,
            miou: 78.33,
        }],
    };
    let md = grid.to_markdown();
    assert!(md.contains("| arm | SR | mAcc | mIoU |"));
    assert!(md.contains("| (d) align+mid | 31.83 | 57.31 | 78.33 |"));
    assert!(grid.to_csv().contains("abc123,1+2+3,(d) align+mid,31.8300,57.3100,78.3300\n"));
}
