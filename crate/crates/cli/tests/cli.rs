//! End-to-end tests driving the compiled `schema` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn schema(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_schema"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = schema(args, &[]);
    assert!(
        out.status.success(),
        "schema {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A world small enough to train in well under a second.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
seed = 5

[world]
num_tasks = 2
steps_per_task = 4
feature_dim = 8
observation_noise_sigma = 0.05
videos_per_task = 6
descriptions_per_side = 2
seed = 5

[model]
k = 2
[model.decoder]
blocks = 1
heads = 2
hidden = 16
dropout = 0.1
embed_dim = 16

[train]
epochs = 3
batch_size = 16

[run]
t = 3
"#,
    )
    .unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).trim_end().to_string();
    assert!(
        !text.contains('\n'),
        "expected a single error line, got:\n{text}"
    );
    text
}

#[test]
fn gen_world_twice_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "gen-world",
            "--config",
            cfg,
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for name in [
        "dataset.json",
        "dataset.bin",
        "corpus.json",
        "descriptions.json",
        "world_meta.json",
    ] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs");
    }
}

#[test]
fn full_pipeline_is_deterministic_and_parsable() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run_all = |out: &Path| {
        let out = out.to_str().unwrap();
        ok(&["gen-world", "--config", cfg, "--out", out]);
        ok(&["train", "--config", cfg, "--out", out]);
        ok(&["eval", "--config", cfg, "--out", out, "--mode", "viterbi"]);
        ok(&["plan", "--config", cfg, "--out", out, "--mode", "viterbi"]);
        ok(&["stepcls", "--config", cfg, "--out", out]);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&a);
    run_all(&b);
    for name in ["train_log.csv", "eval.csv", "plans.jsonl", "stepcls.json"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs");
    }

    let log = String::from_utf8(read(&a.join("train_log.csv"))).unwrap();
    let mut lines = log.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# config_hash="), "{header}");
    assert!(header.contains("seed=5"), "{header}");
    assert_eq!(
        lines.next().unwrap(),
        "epoch,l_align,l_state,l_step,l_task,lr,sr,macc,miou"
    );
    assert_eq!(lines.count(), 3, "one line per epoch");

    let plans = String::from_utf8(read(&a.join("plans.jsonl"))).unwrap();
    assert!(!plans.is_empty());
    for line in plans.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["mode"], "viterbi");
        assert_eq!(v["steps"].as_array().unwrap().len(), 3);
        assert!(v["score"].as_f64().unwrap() <= 0.0);
        assert!(v["sample_id"].is_u64());
    }

    let eval = String::from_utf8(read(&a.join("eval.csv"))).unwrap();
    assert!(eval.starts_with("config_hash,seed,t,sr,macc,miou,samples\n"));
    let stepcls: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&a.join("stepcls.json"))).unwrap()).unwrap();
    assert!(stepcls["accuracy_percent"].as_f64().unwrap() >= 0.0);
    // Every report names the same effective config.
    let meta: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&a.join("world_meta.json"))).unwrap())
            .unwrap();
    assert_eq!(meta["config_hash"], stepcls["config_hash"]);
}

#[test]
fn prob_plans_group_draws_per_context() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    ok(&["gen-world", "--config", cfg, "--out", out_s]);
    ok(&["train", "--config", cfg, "--out", out_s]);
    ok(&[
        "plan",
        "--config",
        cfg,
        "--out",
        out_s,
        "--mode",
        "prob",
        "--override",
        "run.samples=4",
    ]);
    let plans = String::from_utf8(read(&out.join("plans.jsonl"))).unwrap();
    let ids: Vec<u64> = plans
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["sample_id"].as_u64().unwrap())
        .collect();
    let meta: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&out.join("plans_meta.json"))).unwrap())
            .unwrap();
    let contexts = meta["contexts"].as_u64().unwrap();
    assert_eq!(ids.len() as u64, contexts * 4);
    for ctx in 0..contexts {
        assert_eq!(ids.iter().filter(|&&i| i == ctx).count(), 4);
    }
    // Eval has no probabilistic protocol; asking is a config error.
    let out2 = schema(&["eval", "--config", cfg, "--out", out_s, "--mode", "prob"], &[]);
    assert_eq!(out2.status.code(), Some(2));
    assert!(stderr_line(&out2).starts_with("error: "));
}

#[test]
fn describe_mock_matches_gen_world_and_uses_cache() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let cache = dir.path().join("cache");
    ok(&["gen-world", "--config", cfg, "--out", out_s]);
    let original = read(&out.join("corpus.json"));

    let run = schema(
        &["describe", "--config", cfg, "--out", out_s],
        &[("SCHEMA_CACHE_DIR", cache.to_str().unwrap())],
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(read(&out.join("corpus.json")), original);
    let cached = fs::read_dir(&cache).unwrap().count();
    assert!(cached > 0, "cache dir stayed empty");

    // Second run answers from the cache and must not change anything.
    let rerun = schema(
        &["describe", "--config", cfg, "--out", out_s],
        &[("SCHEMA_CACHE_DIR", cache.to_str().unwrap())],
    );
    assert!(rerun.status.success());
    assert_eq!(read(&out.join("corpus.json")), original);
    assert_eq!(fs::read_dir(&cache).unwrap().count(), cached);

    // Re-featurizing with a hashed bag-of-words swaps the description
    // features; training still works on top of them.
    let features_before = read(&out.join("descriptions.json"));
    ok(&[
        "describe",
        "--config",
        cfg,
        "--out",
        out_s,
        "--override",
        "corpus.feature=bow",
        "--override",
        "corpus.bow_dim=8",
    ]);
    assert_ne!(read(&out.join("descriptions.json")), features_before);
    ok(&[
        "train",
        "--config",
        cfg,
        "--out",
        out_s,
        "--override",
        "train.epochs=1",
    ]);
}

#[test]
fn overrides_change_the_embedded_config_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let hash_of = |out: &Path, extra: &[&str]| -> String {
        let mut args = vec!["gen-world", "--config", cfg, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&args);
        let meta: serde_json::Value =
            serde_json::from_str(&String::from_utf8(read(&out.join("world_meta.json"))).unwrap())
                .unwrap();
        meta["config_hash"].as_str().unwrap().to_string()
    };
    let base = hash_of(&dir.path().join("a"), &[]);
    let tweaked = hash_of(&dir.path().join("b"), &["--override", "train.lr=1e-3"]);
    assert_ne!(base, tweaked, "train.lr must be part of the config identity");
    // The output directory is not: same settings, different --out, same hash.
    let moved = hash_of(&dir.path().join("c"), &[]);
    assert_eq!(base, moved);
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    // Unknown config key: exit 2, single line naming the path.
    let out = schema(&["train", "--config", cfg, "--override", "train.lrate=1.0"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: train.lrate"), "{line}");

    // Out-of-range value through the config file path: exit 2 with the path.
    let out = schema(&["train", "--config", cfg, "--override", "run.split_ratio=1.5"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("run.split_ratio"), "{out:?}");

    // Missing input artifacts: exit 3.
    let empty = dir.path().join("empty");
    let out = schema(&["train", "--config", cfg, "--out", empty.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).contains("dataset.json"), "{out:?}");

    // Missing config file: exit 3.
    let out = schema(&["train", "--config", "/nonexistent/x.toml"], &[]);
    assert_eq!(out.status.code(), Some(3));

    // Horizon outside 3..=6 is rejected at the flag level: exit 2.
    let out = schema(&["train", "--config", cfg, "--t", "7"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // And through the config file too.
    let out = schema(&["train", "--config", cfg, "--override", "run.t=2"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("run.t"), "{out:?}");
}

#[test]
fn ablate_decoding_writes_the_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let run = ok(&[
        "ablate",
        "--config",
        cfg,
        "--out",
        out.to_str().unwrap(),
        "--override",
        "ablate.axis=decoding",
        "--override",
        "ablate.seeds=[1]",
        "--override",
        "train.epochs=2",
    ]);
    let md = String::from_utf8(read(&out.join("ablation.md"))).unwrap();
    assert!(md.contains("| argmax |"), "{md}");
    assert!(md.contains("| viterbi |"), "{md}");
    assert_eq!(String::from_utf8_lossy(&run.stdout), md);
    let csv = String::from_utf8(read(&out.join("ablation.csv"))).unwrap();
    assert!(csv.starts_with("config_hash,seeds,arm,sr,macc,miou\n"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
    let grid: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&out.join("ablation.json"))).unwrap())
            .unwrap();
    assert_eq!(grid["rows"].as_array().unwrap().len(), 2);
}
