//! Subcommand implementations. Each command reads and writes artifacts under
//! the configured output directory and prints a one-line summary; all output
//! files are byte-identical across reruns with the same effective config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use schema_core::corpus::{
    build_prompt, default_exemplars, embed_corpus, CompletionBackend, CorpusError,
    DescriptionCorpus, DescriptionFeatures, HashedBow, LlmClient, LlmClientConfig, MockBackend,
    StepDescriptionSet,
};
use schema_core::dataworld::{
    export_features, extract_procedures, generate_world, ingest_features, split_train_test,
    DataError, FeatureManifest, Video,
};
use schema_core::inference::{plan_batch, sample_plans, PlanMode};
use schema_core::metrics::{
    run_decoder_ablation, run_decoding_ablation, run_loss_ablation, run_memory_ablation,
    AblationSpec, EvalReport,
};
use schema_core::planner::{ModelConfig, PlannerModel};
use schema_core::tensor::ParamStore;
use schema_core::training::{
    evaluate, fit, load_model, save_model, stepcls_eval, transition_from_samples,
};

use crate::config::RunConfig;
use crate::CliError;

const DATASET: &str = "dataset.json";
const CORPUS: &str = "corpus.json";
const DESC_FEATURES: &str = "descriptions.json";

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// I/O-rooted failures get the missing-file/unwritable-dir exit code.
fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Io(_) => CliError::Io(e.to_string()),
        _ => CliError::Run(e.to_string()),
    }
}

fn corpus_err(e: CorpusError) -> CliError {
    match e {
        CorpusError::Io(_) => CliError::Io(e.to_string()),
        _ => CliError::Run(e.to_string()),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("output dir {}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_file(path: &Path, what: &str, produced_by: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "missing {what}: {} (run `schema {produced_by}` first)",
            path.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

pub fn gen_world(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let world = generate_world(&cfg.world).map_err(data_err)?;
    export_features(
        &world.videos,
        cfg.world.feature_dim,
        "synthetic",
        &out.join(DATASET),
    )
    .map_err(data_err)?;
    world.corpus.save(&out.join(CORPUS)).map_err(corpus_err)?;
    write_json(&out.join(DESC_FEATURES), &world.desc_features)?;
    write_json(
        &out.join("world_meta.json"),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.world.seed,
            "num_classes": world.num_classes,
            "num_tasks": cfg.world.num_tasks,
            "feature_dim": cfg.world.feature_dim,
            "k": cfg.world.descriptions_per_side,
            "videos": world.videos.len(),
            "orderings": world.orderings,
        }),
    )?;
    println!(
        "world: {} classes over {} tasks, {} videos, feature dim {} -> {}",
        world.num_classes,
        cfg.world.num_tasks,
        world.videos.len(),
        cfg.world.feature_dim,
        out.display()
    );
    Ok(())
}

fn describe_all<B: CompletionBackend>(
    client: &LlmClient<B>,
    old: &DescriptionCorpus,
) -> Result<(Vec<StepDescriptionSet>, usize), CliError> {
    let k = old.k();
    let exemplars = default_exemplars();
    let mut entries = Vec::with_capacity(old.num_classes());
    let mut soft = 0usize;
    for (id, set) in old.iter() {
        let prompt = build_prompt(&set.task, &set.step, &exemplars, k);
        let (fresh, violations) = client
            .describe(&set.task, &set.step, &prompt, k)
            .map_err(|e| CliError::Run(format!("class {id}: {e}")))?;
        soft += violations.len();
        entries.push(fresh);
    }
    Ok((entries, soft))
}

pub fn describe(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let corpus_path = out.join(CORPUS);
    require_file(&corpus_path, "corpus", "gen-world")?;
    let old = DescriptionCorpus::load(&corpus_path).map_err(corpus_err)?;
    let k = old.k();

    let cache_dir = cfg
        .corpus
        .cache_dir
        .clone()
        .or_else(|| std::env::var("SCHEMA_CACHE_DIR").ok())
        .map(PathBuf::from);
    let llm_cfg = LlmClientConfig {
        endpoint: cfg.corpus.endpoint.clone(),
        model: cfg.corpus.model.clone(),
        timeout_secs: cfg.corpus.timeout_secs,
        max_retries: cfg.corpus.max_retries,
        cache_dir,
        temperature: cfg.corpus.temperature,
        max_tokens: cfg.corpus.max_tokens,
        api_key_env: cfg.corpus.api_key_env.clone(),
    };

    let (entries, soft) = match cfg.corpus.backend.as_str() {
        "mock" => {
            // Same seed as the world generator, so the mock path reproduces
            // gen-world's corpus byte for byte.
            let backend = MockBackend {
                k,
                seed: cfg.world.seed,
            };
            describe_all(&LlmClient::new(llm_cfg, backend), &old)?
        }
        "http" => describe_http(llm_cfg, &old)?,
        other => unreachable!("validated backend {other:?}"),
    };
    let corpus = DescriptionCorpus::new(k, entries).map_err(run_err)?;
    corpus.save(&corpus_path).map_err(corpus_err)?;
    if cfg.corpus.feature == "bow" {
        let bow = HashedBow::new(cfg.corpus.bow_dim, cfg.world.seed);
        let feats = embed_corpus(&corpus, &bow).map_err(run_err)?;
        write_json(&out.join(DESC_FEATURES), &feats)?;
    }
    println!(
        "corpus: {} classes described (K={k}), {soft} soft violations -> {}",
        corpus.num_classes(),
        corpus_path.display()
    );
    Ok(())
}

#[cfg(feature = "llm-http")]
fn describe_http(
    llm_cfg: LlmClientConfig,
    old: &DescriptionCorpus,
) -> Result<(Vec<StepDescriptionSet>, usize), CliError> {
    if llm_cfg.endpoint.is_empty() {
        return Err(CliError::Config(
            "corpus.endpoint: required for the http backend".into(),
        ));
    }
    describe_all(&LlmClient::new(llm_cfg, schema_core::corpus::HttpBackend), old)
}

#[cfg(not(feature = "llm-http"))]
fn describe_http(
    _llm_cfg: LlmClientConfig,
    _old: &DescriptionCorpus,
) -> Result<(Vec<StepDescriptionSet>, usize), CliError> {
    Err(CliError::Config(
        "corpus.backend: \"http\" needs a build with the llm-http feature".into(),
    ))
}

/// The frozen inputs every model-facing command starts from.
struct LoadedData {
    videos: Vec<Video>,
    feats: DescriptionFeatures,
    feature_dim: usize,
    num_tasks: usize,
}

fn load_data(out: &Path) -> Result<LoadedData, CliError> {
    let manifest_path = out.join(DATASET);
    require_file(&manifest_path, "dataset manifest", "gen-world")?;
    let manifest: FeatureManifest = read_json(&manifest_path)?;
    let videos = ingest_features(&manifest_path, Some(manifest.feature_dim)).map_err(data_err)?;
    if videos.is_empty() {
        return Err(CliError::Run("dataset has no videos".into()));
    }

    let feats_path = out.join(DESC_FEATURES);
    require_file(&feats_path, "description features", "gen-world")?;
    let feats: DescriptionFeatures = read_json(&feats_path)?;

    let corpus_path = out.join(CORPUS);
    require_file(&corpus_path, "corpus", "gen-world")?;
    let corpus = DescriptionCorpus::load(&corpus_path).map_err(corpus_err)?;
    if corpus.num_classes() != feats.c || corpus.k() != feats.k {
        return Err(CliError::Run(format!(
            "description features ({} classes, K={}) disagree with corpus ({} classes, K={}); rerun describe",
            feats.c, feats.k, corpus.num_classes(), corpus.k()
        )));
    }
    // Corpus completeness: every referenced step class must be described.
    for v in &videos {
        if let Some(&class) = v.steps.iter().find(|&&c| c >= corpus.num_classes()) {
            return Err(CliError::Run(format!(
                "video {} references step class {class}, corpus describes only {}",
                v.id,
                corpus.num_classes()
            )));
        }
    }
    let num_tasks = videos.iter().map(|v| v.task).max().unwrap_or(0) + 1;
    Ok(LoadedData {
        videos,
        feats,
        feature_dim: manifest.feature_dim,
        num_tasks,
    })
}

fn model_config_for(cfg: &RunConfig, data: &LoadedData) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.feature_dim = data.feature_dim;
    m.desc_feature_dim = Some(data.feats.dim);
    m.num_classes = data.feats.c;
    m.num_tasks = data.num_tasks;
    m.k = data.feats.k;
    m
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let data = load_data(&out)?;
    let samples = extract_procedures(&data.videos, cfg.run.t).map_err(data_err)?;
    if samples.is_empty() {
        return Err(CliError::Run(format!(
            "no length-{} windows in the dataset",
            cfg.run.t
        )));
    }
    let split = split_train_test(&samples, cfg.run.split_ratio, cfg.seed);
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model =
        PlannerModel::new(&mut store, &mut rng, model_config_for(cfg, &data)).map_err(run_err)?;
    let tconfig = cfg
        .train
        .to_train_config(cfg.seed, Some(out.join("best.json")));
    let report = fit(
        &mut store,
        &model,
        &data.feats,
        &split.train,
        &split.test,
        &tconfig,
    )
    .map_err(run_err)?;

    let hash = cfg.hash();
    let mut log = format!("# config_hash={hash} seed={}\n", cfg.seed);
    log.push_str(&report.to_csv());
    write_text(&out.join("train_log.csv"), &log)?;

    let ckpt = out.join(&cfg.run.checkpoint);
    save_model(
        &ckpt,
        &store,
        &model,
        json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "best_sr": report.best_sr,
            "best_epoch": report.best_epoch,
        }),
    )
    .map_err(run_err)?;
    println!(
        "trained {} epochs on {} windows ({} held out): best SR {:.2} -> {}",
        report.epochs.len(),
        split.train.len(),
        split.test.len(),
        report.best_sr,
        ckpt.display()
    );
    Ok(())
}

fn load_checkpointed(
    cfg: &RunConfig,
    out: &Path,
) -> Result<(ParamStore<f32>, PlannerModel), CliError> {
    let ckpt = out.join(&cfg.run.checkpoint);
    require_file(&ckpt, "checkpoint", "train")?;
    let (store, model, _meta) = load_model(&ckpt).map_err(run_err)?;
    Ok((store, model))
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.run.mode == PlanMode::Prob {
        return Err(CliError::Config(
            "run.mode: eval scores argmax or viterbi decoding, not prob".into(),
        ));
    }
    let out = out_dir(cfg)?;
    let data = load_data(&out)?;
    let (store, model) = load_checkpointed(cfg, &out)?;

    let mut horizons = cfg.run.eval_horizons.clone();
    if horizons.is_empty() {
        horizons.push(cfg.run.t);
    }
    let mut rows = Vec::new();
    for &t in &horizons {
        let samples = extract_procedures(&data.videos, t).map_err(data_err)?;
        let split = split_train_test(&samples, cfg.run.split_ratio, cfg.seed);
        if split.test.is_empty() {
            return Err(CliError::Run(format!("no held-out windows at t={t}")));
        }
        let tm = match cfg.run.mode {
            PlanMode::Viterbi => Some(
                transition_from_samples(&split.train, model.config.num_classes)
                    .map_err(run_err)?,
            ),
            _ => None,
        };
        rows.extend(
            evaluate(
                &store,
                &model,
                &data.feats,
                &split.test,
                cfg.run.mode,
                tm.as_ref(),
            )
            .map_err(run_err)?,
        );
    }
    let report = EvalReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
    };
    write_text(&out.join("eval.csv"), &report.to_csv())?;
    write_text(&out.join("eval.json"), &report.to_json())?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn plan(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let data = load_data(&out)?;
    let (store, model) = load_checkpointed(cfg, &out)?;
    let samples = extract_procedures(&data.videos, cfg.run.t).map_err(data_err)?;
    let split = split_train_test(&samples, cfg.run.split_ratio, cfg.seed);
    if split.test.is_empty() {
        return Err(CliError::Run(format!(
            "no held-out windows at t={}",
            cfg.run.t
        )));
    }

    let mut lines = String::new();
    let mut records = 0usize;
    match cfg.run.mode {
        PlanMode::Argmax | PlanMode::Viterbi => {
            let tm = match cfg.run.mode {
                PlanMode::Viterbi => Some(
                    transition_from_samples(&split.train, model.config.num_classes)
                        .map_err(run_err)?,
                ),
                _ => None,
            };
            let plans = plan_batch(
                &store,
                &model,
                &data.feats,
                &split.test,
                cfg.run.mode,
                tm.as_ref(),
            )
            .map_err(run_err)?;
            for p in &plans {
                lines.push_str(&p.to_jsonl());
                lines.push('\n');
            }
            records = plans.len();
        }
        PlanMode::Prob => {
            // `samples` independent draws per held-out context; records share
            // the context's sample_id so draws group in the output.
            for (i, s) in split.test.iter().enumerate() {
                let seed = cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let draws = sample_plans(
                    &store,
                    &model,
                    &data.feats,
                    s,
                    cfg.run.samples,
                    seed,
                    cfg.run.sigma,
                    None,
                )
                .map_err(run_err)?;
                for mut p in draws {
                    p.sample_id = i;
                    lines.push_str(&p.to_jsonl());
                    lines.push('\n');
                    records += 1;
                }
            }
        }
    }
    let plans_path = out.join("plans.jsonl");
    write_text(&plans_path, &lines)?;
    write_json(
        &out.join("plans_meta.json"),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "mode": cfg.run.mode,
            "t": cfg.run.t,
            "contexts": split.test.len(),
            "records": records,
        }),
    )?;
    println!(
        "wrote {records} plans ({} over {} contexts) -> {}",
        cfg.run.mode,
        split.test.len(),
        plans_path.display()
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let spec = AblationSpec {
        world: cfg.world.clone(),
        model: cfg.model.clone(),
        train: cfg.train.to_train_config(cfg.seed, None),
        seeds: cfg.ablate.seeds.clone(),
        t: cfg.run.t,
        split_ratio: cfg.run.split_ratio,
        config_hash: cfg.hash(),
    };
    let grid = match cfg.ablate.axis.as_str() {
        "losses" => run_loss_ablation(&spec),
        "decoders" => run_decoder_ablation(&spec),
        "memory" => run_memory_ablation(&spec),
        "decoding" => run_decoding_ablation(&spec),
        other => unreachable!("validated axis {other:?}"),
    }
    .map_err(run_err)?;
    write_text(&out.join("ablation.csv"), &grid.to_csv())?;
    write_text(&out.join("ablation.md"), &grid.to_markdown())?;
    write_text(&out.join("ablation.json"), &grid.to_json())?;
    print!("{}", grid.to_markdown());
    Ok(())
}

pub fn stepcls(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let data = load_data(&out)?;
    let (store, model) = load_checkpointed(cfg, &out)?;
    let singles = extract_procedures(&data.videos, 1).map_err(data_err)?;
    let split = split_train_test(&singles, cfg.run.split_ratio, cfg.seed);
    if split.test.is_empty() {
        return Err(CliError::Run("no held-out single-step samples".into()));
    }
    let acc = stepcls_eval(&store, &model, &data.feats, &split.test).map_err(run_err)?;
    write_json(
        &out.join("stepcls.json"),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "accuracy_percent": acc,
            "samples": split.test.len(),
        }),
    )?;
    println!(
        "step classification: {acc:.2}% over {} held-out singles",
        split.test.len()
    );
    Ok(())
}
