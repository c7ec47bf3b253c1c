//! World generation: latent state chains, optional alternative orderings,
//! observation sampling, and the paired description corpus.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    embed_corpus, mock_corpus, DescKind, DescriptionCorpus, DescriptionFeatures, Precomputed,
};
use crate::rngutil::gaussian;

use super::DataError;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_tasks: usize,
    pub steps_per_task: usize,
    pub feature_dim: usize,
    /// Stddev of the isotropic noise added to every visual observation.
    pub observation_noise_sigma: f64,
    pub videos_per_task: usize,
    /// Probability that a task also admits one alternative step ordering.
    pub branching: f64,
    /// Stddev of the noise between a latent state and its description
    /// features; controls how informative the description memory is.
    pub description_noise_sigma: f64,
    /// Descriptions per state side (K).
    pub descriptions_per_side: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_tasks: 6,
            steps_per_task: 4,
            feature_dim: 32,
            observation_noise_sigma: 0.1,
            videos_per_task: 20,
            branching: 0.0,
            description_noise_sigma: 0.05,
            descriptions_per_side: 3,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive: [(&'static str, usize); 5] = [
            ("num_tasks", self.num_tasks),
            ("steps_per_task", self.steps_per_task),
            ("feature_dim", self.feature_dim),
            ("videos_per_task", self.videos_per_task),
            ("descriptions_per_side", self.descriptions_per_side),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(DataError::InvalidSpec {
                    field,
                    detail: "must be positive".into(),
                });
            }
        }
        for (field, v) in [
            ("observation_noise_sigma", self.observation_noise_sigma),
            ("description_noise_sigma", self.description_noise_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(DataError::InvalidSpec {
                    field,
                    detail: format!("must be >= 0, got {v}"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.branching) {
            return Err(DataError::InvalidSpec {
                field: "branching",
                detail: format!("must be in [0, 1], got {}", self.branching),
            });
        }
        Ok(())
    }
}

/// One demonstration: the steps actually performed plus an observation around
/// each step's start and end.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: usize,
    pub task: usize,
    pub steps: Vec<usize>,
    pub start_obs: Vec<Vec<f32>>,
    pub end_obs: Vec<Vec<f32>>,
}

/// The ground-truth plan distribution for one (start, goal) context.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeContext {
    pub task: usize,
    pub offset: usize,
    /// Distinct valid step sequences with their probabilities (sum 1).
    pub modes: Vec<(Vec<usize>, f64)>,
}

#[derive(Debug)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub num_classes: usize,
    /// Latent before/after state vector per class.
    pub before: Vec<Vec<f32>>,
    pub after: Vec<Vec<f32>>,
    /// Valid step orderings per task (1 normally, 2 for branching tasks).
    pub orderings: Vec<Vec<Vec<usize>>>,
    pub videos: Vec<Video>,
    pub corpus: DescriptionCorpus,
    /// Raw description features in canonical memory layout.
    pub desc_features: DescriptionFeatures,
}

const STEP_VERBS: [&str; 8] = [
    "attach", "polish", "measure", "fold", "slot", "tighten", "align", "seal",
];

fn add_noise(rng: &mut ChaCha8Rng, latent: &[f32], sigma: f64) -> Vec<f32> {
    latent
        .iter()
        .map(|&x| (x as f64 + sigma * gaussian(rng)) as f32)
        .collect()
}

/// Random unit vectors, orthogonalized greedily while dimensionality allows.
fn state_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if i < dim {
            for b in &basis[..i.min(basis.len())] {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                for (x, &bv) in v.iter_mut().zip(b) {
                    *x -= dot * bv;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.steps_per_task;
    let c = spec.num_tasks * s;

    // Decide branching first: a swap of steps t and t+1 (0-based positions in
    // the chain) is only consistent if states t-1..t+1 collapse to one vector,
    // so collapsed state slots share a latent.
    let mut swap_at: Vec<Option<usize>> = Vec::with_capacity(spec.num_tasks);
    for _ in 0..spec.num_tasks {
        let branch = s >= 2 && rng.random::<f64>() < spec.branching;
        swap_at.push(if branch {
            Some(rng.random_range(0..s - 1))
        } else {
            None
        });
    }

    // Map each task's s+1 state slots to global unique-state ids.
    let mut slot_state: Vec<Vec<usize>> = Vec::with_capacity(spec.num_tasks);
    let mut unique_states = 0usize;
    for &swap in &swap_at {
        let mut ids = Vec::with_capacity(s + 1);
        for slot in 0..=s {
            let collapses = match swap {
                // Swapping steps t,t+1 merges state slots t, t+1, t+2.
                Some(t) => slot == t + 1 || slot == t + 2,
                None => false,
            };
            if collapses {
                let first = ids[ids.len() - 1];
                ids.push(first);
            } else {
                ids.push(unique_states);
                unique_states += 1;
            }
        }
        slot_state.push(ids);
    }

    let states = state_vectors(&mut rng, unique_states, spec.feature_dim);

    let mut before = Vec::with_capacity(c);
    let mut after = Vec::with_capacity(c);
    let mut orderings = Vec::with_capacity(spec.num_tasks);
    for task in 0..spec.num_tasks {
        let classes: Vec<usize> = (0..s).map(|i| task * s + i).collect();
        for i in 0..s {
            before.push(states[slot_state[task][i]].clone());
            after.push(states[slot_state[task][i + 1]].clone());
        }
        let mut orders = vec![classes.clone()];
        if let Some(t) = swap_at[task] {
            let mut alt = classes;
            alt.swap(t, t + 1);
            orders.push(alt);
        }
        orderings.push(orders);
    }

    // Descriptions: mock text per class, raw features = latent + noise.
    let classes: Vec<(String, String, String)> = (0..c)
        .map(|id| {
            let verb = STEP_VERBS[id % STEP_VERBS.len()];
            (
                format!("assemble kit {}", id / s),
                format!("{verb} part {id}"),
                verb.to_string(),
            )
        })
        .collect();
    let k = spec.descriptions_per_side;
    let corpus = mock_corpus(&classes, k, spec.seed)
        .expect("mock corpus generation cannot fail for generated names");
    let mut feats = Precomputed::new(spec.feature_dim);
    for class in 0..c {
        for j in 0..k {
            let b = add_noise(&mut rng, &before[class], spec.description_noise_sigma);
            feats
                .insert(class, DescKind::Before(j), b)
                .expect("dims match by construction");
            let a = add_noise(&mut rng, &after[class], spec.description_noise_sigma);
            feats
                .insert(class, DescKind::After(j), a)
                .expect("dims match by construction");
        }
        let mid: Vec<f32> = before[class]
            .iter()
            .zip(&after[class])
            .map(|(&b, &a)| (b + a) / 2.0)
            .collect();
        feats
            .insert(class, DescKind::Step, add_noise(&mut rng, &mid, spec.description_noise_sigma))
            .expect("dims match by construction");
    }
    let desc_features =
        embed_corpus(&corpus, &feats).expect("all keys inserted above");

    // Videos: each demonstrates one uniformly chosen valid ordering.
    let mut videos = Vec::with_capacity(spec.num_tasks * spec.videos_per_task);
    for task in 0..spec.num_tasks {
        for _ in 0..spec.videos_per_task {
            let pick = rng.random_range(0..orderings[task].len());
            let steps = orderings[task][pick].clone();
            let start_obs = steps
                .iter()
                .map(|&cl| add_noise(&mut rng, &before[cl], spec.observation_noise_sigma))
                .collect();
            let end_obs = steps
                .iter()
                .map(|&cl| add_noise(&mut rng, &after[cl], spec.observation_noise_sigma))
                .collect();
            videos.push(Video {
                id: videos.len(),
                task,
                steps,
                start_obs,
                end_obs,
            });
        }
    }

    Ok(SyntheticWorld {
        spec: spec.clone(),
        num_classes: c,
        before,
        after,
        orderings,
        videos,
        corpus,
        desc_features,
    })
}

impl SyntheticWorld {
    /// Every length-`t` window of every valid ordering of every task; the
    /// membership test for "is this plan a valid chain of some task".
    pub fn valid_chain_windows(&self, t: usize) -> std::collections::HashSet<Vec<usize>> {
        let mut set = std::collections::HashSet::new();
        for orders in &self.orderings {
            for order in orders {
                if order.len() < t {
                    continue;
                }
                for o in 0..=order.len() - t {
                    set.insert(order[o..o + t].to_vec());
                }
            }
        }
        set
    }

    /// Ground-truth plan distributions per (start, goal) context, keyed by
    /// (task, window offset). Orderings are weighted uniformly.
    pub fn mode_contexts(&self, t: usize) -> Vec<ModeContext> {
        let mut out = Vec::new();
        for (task, orders) in self.orderings.iter().enumerate() {
            let len = orders[0].len();
            if len < t {
                continue;
            }
            for o in 0..=len - t {
                let mut modes: Vec<(Vec<usize>, f64)> = Vec::new();
                let w = 1.0 / orders.len() as f64;
                for order in orders {
                    let seq = order[o..o + t].to_vec();
                    match modes.iter_mut().find(|(s, _)| *s == seq) {
                        Some((_, p)) => *p += w,
                        None => modes.push((seq, w)),
                    }
                }
                out.push(ModeContext {
                    task,
                    offset: o,
                    modes,
                });
            }
        }
        out
    }
}
