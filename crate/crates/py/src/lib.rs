//! Python bindings over the core crate: synthetic worlds, datasets, the
//! planner (train / evaluate / plan / sample), Viterbi decoding, sequence
//! metrics, and the corpus text tooling.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use schema_core::corpus::{
    default_exemplars, mock_llm_generate, parse_llm_response, DescriptionFeatures,
};
use schema_core::dataworld::{
    extract_procedures, generate_world, split_train_test, ProcedureSample, SyntheticWorld,
    WorldSpec,
};
use schema_core::inference::{
    plan_batch, sample_plans as core_sample_plans, viterbi_decode as core_viterbi, PlanMode,
    PlanResult, TransitionModel,
};
use schema_core::metrics::sequence_metrics as core_sequence_metrics;
use schema_core::planner::{DecoderConfig, MemorySource, ModelConfig, PlannerModel};
use schema_core::tensor::{AdamConfig, ParamStore};
use schema_core::training::{
    evaluate as core_evaluate, fit, load_model, save_model, stepcls_eval,
    transition_from_samples, LossWeights, TrainConfig,
};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(s: &str) -> PyResult<PlanMode> {
    match s {
        "argmax" => Ok(PlanMode::Argmax),
        "viterbi" => Ok(PlanMode::Viterbi),
        "prob" => Ok(PlanMode::Prob),
        _ => Err(err(format!(
            "mode must be \"argmax\", \"viterbi\" or \"prob\", got {s:?}"
        ))),
    }
}

fn parse_memory(s: &str) -> PyResult<MemorySource> {
    match s {
        "state-descriptions" => Ok(MemorySource::StateDescriptions),
        "step-descriptions" => Ok(MemorySource::StepDescriptions),
        "random" => Ok(MemorySource::Random),
        _ => Err(err(format!(
            "memory must be \"state-descriptions\", \"step-descriptions\" or \"random\", got {s:?}"
        ))),
    }
}

/// A generated synthetic world: task graphs, videos, and the description
/// corpus with its frozen text features.
#[pyclass(name = "World")]
struct PyWorld {
    world: SyntheticWorld,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (
        num_tasks = 6, steps_per_task = 4, feature_dim = 32,
        observation_noise_sigma = 0.1, videos_per_task = 20, branching = 0.0,
        description_noise_sigma = 0.05, descriptions_per_side = 3, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_tasks: usize,
        steps_per_task: usize,
        feature_dim: usize,
        observation_noise_sigma: f64,
        videos_per_task: usize,
        branching: f64,
        description_noise_sigma: f64,
        descriptions_per_side: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = WorldSpec {
            num_tasks,
            steps_per_task,
            feature_dim,
            observation_noise_sigma,
            videos_per_task,
            branching,
            description_noise_sigma,
            descriptions_per_side,
            seed,
        };
        Ok(PyWorld {
            world: generate_world(&spec).map_err(err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.world.num_classes
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.world.spec.num_tasks
    }

    #[getter]
    fn num_videos(&self) -> usize {
        self.world.videos.len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.world.spec.feature_dim
    }

    #[getter]
    fn k(&self) -> usize {
        self.world.spec.descriptions_per_side
    }

    /// The description set of one step class.
    fn description<'py>(&self, py: Python<'py>, class: usize) -> PyResult<Bound<'py, PyDict>> {
        let set = self.world.corpus.get(class).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("task", &set.task)?;
        d.set_item("step", &set.step)?;
        d.set_item("verb", &set.verb)?;
        d.set_item("step_description", &set.step_description)?;
        d.set_item("before", &set.before)?;
        d.set_item("after", &set.after)?;
        Ok(d)
    }

    /// All length-`t` sliding windows of every video.
    fn extract(&self, t: usize) -> PyResult<PyDataset> {
        let samples = extract_procedures(&self.world.videos, t).map_err(err)?;
        Ok(self.dataset(samples))
    }

    /// Windows at horizon `t`, split by video (stratified per task).
    #[pyo3(signature = (t, ratio = 0.7, seed = 0))]
    fn split(&self, t: usize, ratio: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let samples = extract_procedures(&self.world.videos, t).map_err(err)?;
        let split = split_train_test(&samples, ratio, seed);
        Ok((self.dataset(split.train), self.dataset(split.test)))
    }

    /// Step sequences consistent with some task's chain, as ground truth for
    /// checking decoded plans.
    fn valid_windows(&self, t: usize) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = self.world.valid_chain_windows(t).into_iter().collect();
        v.sort();
        v
    }
}

impl PyWorld {
    fn dataset(&self, samples: Vec<ProcedureSample>) -> PyDataset {
        PyDataset {
            samples,
            feature_dim: self.world.spec.feature_dim,
            num_classes: self.world.num_classes,
            num_tasks: self.world.spec.num_tasks,
        }
    }
}

/// A set of procedure samples plus the shape facts training needs.
#[pyclass(name = "Dataset")]
struct PyDataset {
    samples: Vec<ProcedureSample>,
    feature_dim: usize,
    num_classes: usize,
    num_tasks: usize,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.samples.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    fn sample<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .samples
            .get(i)
            .ok_or_else(|| err(format!("sample {i} out of range ({})", self.samples.len())))?;
        let d = PyDict::new(py);
        d.set_item("video_id", s.video_id)?;
        d.set_item("task", s.task)?;
        d.set_item("offset", s.offset)?;
        d.set_item("steps", &s.steps)?;
        d.set_item("s0", &s.s0)?;
        d.set_item("st", &s.st)?;
        Ok(d)
    }
}

/// The trainable planning model bound to one world's description features.
#[pyclass(name = "Planner")]
struct PyPlanner {
    store: ParamStore<f32>,
    model: PlannerModel,
    feats: DescriptionFeatures,
}

fn plan_dict<'py>(py: Python<'py>, p: &PlanResult, sample_id: usize) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("sample_id", sample_id)?;
    d.set_item("steps", &p.steps)?;
    d.set_item("score", p.score)?;
    d.set_item("mode", p.mode.to_string())?;
    d.set_item("emissions", &p.emissions)?;
    Ok(d)
}

impl PyPlanner {
    fn transition_for(
        &self,
        mode: PlanMode,
        from: Option<&PyDataset>,
    ) -> PyResult<Option<TransitionModel>> {
        if mode != PlanMode::Viterbi {
            return Ok(None);
        }
        let from = from.ok_or_else(|| {
            err("viterbi needs transition_from=<training dataset> for its transition statistics")
        })?;
        Ok(Some(
            transition_from_samples(&from.samples, self.model.config.num_classes).map_err(err)?,
        ))
    }
}

#[pymethods]
impl PyPlanner {
    #[new]
    #[pyo3(signature = (
        world, embed_dim = 32, blocks = 1, heads = 4, hidden = 32, dropout = 0.1,
        max_horizon = 6, use_task_feature = true, two_decoders = true,
        memory = "state-descriptions", seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        world: &PyWorld,
        embed_dim: usize,
        blocks: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
        max_horizon: usize,
        use_task_feature: bool,
        two_decoders: bool,
        memory: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            feature_dim: world.world.spec.feature_dim,
            desc_feature_dim: Some(world.world.desc_features.dim),
            num_classes: world.world.num_classes,
            num_tasks: world.world.spec.num_tasks,
            k: world.world.spec.descriptions_per_side,
            max_horizon,
            decoder: DecoderConfig {
                blocks,
                heads,
                hidden,
                dropout,
                embed_dim,
            },
            use_task_feature,
            two_decoders,
            memory_source: parse_memory(memory)?,
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PlannerModel::new(&mut store, &mut rng, config).map_err(err)?;
        Ok(PyPlanner {
            store,
            model,
            feats: world.world.desc_features.clone(),
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Trains in place; returns one stats dict per epoch. The GIL is released
    /// while the optimizer runs.
    #[pyo3(signature = (
        train, test = None, epochs = 30, batch_size = 64, lr = 5e-3,
        decay_factor = 0.65, decay_every = 40, seed = 0,
        align_weight = 1.0, state_weight = 1.0, step_weight = 1.0, task_weight = 1.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train: &PyDataset,
        test: Option<&PyDataset>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        decay_factor: f64,
        decay_every: usize,
        seed: u64,
        align_weight: f64,
        state_weight: f64,
        step_weight: f64,
        task_weight: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let config = TrainConfig {
            epochs,
            batch_size,
            adam: AdamConfig {
                lr,
                decay_factor,
                decay_every,
                ..AdamConfig::default()
            },
            seed,
            weights: LossWeights {
                align: align_weight,
                state: state_weight,
                step: step_weight,
                task: task_weight,
            },
            checkpoint: None,
        };
        let empty: Vec<ProcedureSample> = Vec::new();
        let test_samples = test.map_or(&empty[..], |d| &d.samples[..]);
        let (store, model, feats) = (&mut self.store, &self.model, &self.feats);
        let report = py
            .detach(|| fit(store, model, feats, &train.samples, test_samples, &config))
            .map_err(err)?;
        report
            .epochs
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("l_align", e.l_align)?;
                d.set_item("l_state", e.l_state)?;
                d.set_item("l_step", e.l_step)?;
                d.set_item("l_task", e.l_task)?;
                d.set_item("lr", e.lr)?;
                d.set_item("sr", e.sr)?;
                d.set_item("macc", e.macc)?;
                d.set_item("miou", e.miou)?;
                Ok(d)
            })
            .collect()
    }

    /// Per-horizon success rate / mean accuracy / mean IoU rows.
    #[pyo3(signature = (dataset, mode = "argmax", transition_from = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        mode: &str,
        transition_from: Option<&PyDataset>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mode = parse_mode(mode)?;
        let tm = self.transition_for(mode, transition_from)?;
        let rows = core_evaluate(
            &self.store,
            &self.model,
            &self.feats,
            &dataset.samples,
            mode,
            tm.as_ref(),
        )
        .map_err(err)?;
        rows.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("t", r.t)?;
                d.set_item("sr", r.sr)?;
                d.set_item("macc", r.macc)?;
                d.set_item("miou", r.miou)?;
                d.set_item("samples", r.samples)?;
                Ok(d)
            })
            .collect()
    }

    /// Decodes one plan per sample, in dataset order.
    #[pyo3(signature = (dataset, mode = "argmax", transition_from = None))]
    fn plan<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        mode: &str,
        transition_from: Option<&PyDataset>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mode = parse_mode(mode)?;
        let tm = self.transition_for(mode, transition_from)?;
        // plan_batch wants a single horizon per call; group, then restore
        // dataset order.
        let mut by_t: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            by_t.entry(s.steps.len()).or_default().push(i);
        }
        let mut out: Vec<Option<Bound<'py, PyDict>>> = vec![None; dataset.samples.len()];
        for idxs in by_t.values() {
            let subset: Vec<ProcedureSample> =
                idxs.iter().map(|&i| dataset.samples[i].clone()).collect();
            let plans = plan_batch(&self.store, &self.model, &self.feats, &subset, mode, tm.as_ref())
                .map_err(err)?;
            for (p, &orig) in plans.iter().zip(idxs) {
                out[orig] = Some(plan_dict(py, p, orig)?);
            }
        }
        Ok(out.into_iter().map(|d| d.expect("every slot filled")).collect())
    }

    /// `n` noisy plan draws for one sample (the probabilistic variant).
    #[pyo3(signature = (dataset, index, n = 10, seed = 0, sigma = 1.0))]
    fn sample_plans<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        index: usize,
        n: usize,
        seed: u64,
        sigma: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let s = dataset
            .samples
            .get(index)
            .ok_or_else(|| err(format!("sample {index} out of range ({})", dataset.samples.len())))?;
        let draws = core_sample_plans(&self.store, &self.model, &self.feats, s, n, seed, sigma, None)
            .map_err(err)?;
        draws.iter().map(|p| plan_dict(py, p, index)).collect()
    }

    /// Zero-shot step classification accuracy (percent) on t=1 samples.
    fn stepcls(&self, dataset: &PyDataset) -> PyResult<f64> {
        stepcls_eval(&self.store, &self.model, &self.feats, &dataset.samples).map_err(err)
    }

    /// Writes a self-contained checkpoint (parameters, model config, and the
    /// description features).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let extra = serde_json::json!({
            "desc_features": &self.feats,
        });
        save_model(&path, &self.store, &self.model, extra).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (store, model, meta) = load_model(&path).map_err(err)?;
        let feats: DescriptionFeatures = serde_json::from_value(
            meta.extra
                .get("desc_features")
                .cloned()
                .ok_or_else(|| err("checkpoint has no desc_features (not written by Planner.save?)"))?,
        )
        .map_err(err)?;
        Ok(PyPlanner {
            store,
            model,
            feats,
        })
    }
}

/// Most-likely step path through per-position class distributions. The
/// transition statistics come from `sequences` (label sequences, e.g. the
/// training windows); omitted means uniform transitions.
#[pyfunction]
#[pyo3(signature = (emissions, num_classes, sequences = None))]
fn viterbi_decode(
    emissions: Vec<Vec<f64>>,
    num_classes: usize,
    sequences: Option<Vec<Vec<usize>>>,
) -> PyResult<(Vec<usize>, f64)> {
    let tm = match sequences {
        Some(seqs) => TransitionModel::from_labels(&seqs, num_classes).map_err(err)?,
        None => TransitionModel::uniform(num_classes),
    };
    core_viterbi(&emissions, &tm).map_err(err)
}

/// (success rate, mean accuracy, mean IoU), all in percent.
#[pyfunction]
fn sequence_metrics(preds: Vec<Vec<usize>>, gts: Vec<Vec<usize>>) -> PyResult<(f64, f64, f64)> {
    core_sequence_metrics(&preds, &gts).map_err(err)
}

/// The chain-of-thought description prompt for one (task, step) query.
#[pyfunction]
#[pyo3(signature = (task, step, k = 3))]
fn build_prompt(task: &str, step: &str, k: usize) -> String {
    schema_core::corpus::build_prompt(task, step, &default_exemplars(), k)
}

/// What the offline mock backend answers for one description prompt.
#[pyfunction]
#[pyo3(signature = (task, step, verb, k = 3, seed = 0))]
fn mock_completion(task: &str, step: &str, verb: &str, k: usize, seed: u64) -> String {
    mock_llm_generate(task, step, verb, k, seed)
}

/// Parses a completion into its sections; errors on structural violations.
#[pyfunction]
#[pyo3(signature = (text, k = 3))]
fn parse_response<'py>(py: Python<'py>, text: &str, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let parsed = parse_llm_response(text, k).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("verb", parsed.verb)?;
    d.set_item("step_description", parsed.description)?;
    d.set_item("before", parsed.before)?;
    d.set_item("after", parsed.after)?;
    Ok(d)
}

#[pymodule]
fn schema_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPlanner>()?;
    m.add_function(wrap_pyfunction!(viterbi_decode, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(mock_completion, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    Ok(())
}
