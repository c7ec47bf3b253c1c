//! Named trainable parameters, kept outside any one graph so they survive
//! across batches. Each training step binds the store into a fresh graph,
//! runs forward/backward there, then folds the leaf gradients back in.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, TensorError, TensorId};
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Normal(f64),
}

pub struct ParamStore<E: Real> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<E>>,
    grads: Vec<Vec<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let n = rows * cols;
        let values: Vec<E> = match init {
            Init::Zeros => vec![E::ZERO; n],
            Init::Ones => vec![E::ONE; n],
            Init::XavierUniform => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..n)
                    .map(|_| E::from_f64(rng.random_range(-limit..=limit)))
                    .collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller keeps us off extra distribution crates.
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random();
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    E::from_f64(z * std)
                })
                .collect(),
        };
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.values.push(values);
        self.grads.push(vec![E::ZERO; n]);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[E] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [E] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[E] {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(E::ZERO);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Inserts every parameter into `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<E>) -> Result<ParamBinding, TensorError> {
        let mut pairs = Vec::with_capacity(self.names.len());
        for id in self.ids() {
            let (r, c) = self.shapes[id.0];
            let tid = graph.leaf_param(&self.values[id.0], r, c)?;
            pairs.push((id, tid));
        }
        Ok(ParamBinding { pairs })
    }

    /// Accumulates the bound leaves' gradients from `graph` into this store.
    /// Leaves untouched by the loss contribute nothing.
    pub fn absorb_grads(&mut self, graph: &Graph<E>, binding: &ParamBinding) {
        for &(pid, tid) in &binding.pairs {
            if let Some(g) = graph.grad(tid) {
                for (d, &x) in self.grads[pid.0].iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
    }

    /// Same parameters at f64 precision, for finite-difference checking.
    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| x.to_f64()).collect())
                .collect(),
            grads: self
                .grads
                .iter()
                .map(|v| vec![0.0; v.len()])
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore<f64> {
    /// Narrow back down to f32, e.g. after checking gradients.
    pub fn to_f32(&self) -> ParamStore<f32> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|&x| x as f32).collect())
                .collect(),
            grads: self.grads.iter().map(|v| vec![0.0; v.len()]).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<E: Real> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Maps store parameters to the leaf tensors of one particular graph.
pub struct ParamBinding {
    pairs: Vec<(ParamId, TensorId)>,
}

impl ParamBinding {
    pub fn tensor(&self, id: ParamId) -> TensorId {
        self.pairs[id.0].1
    }

    pub fn pairs(&self) -> &[(ParamId, TensorId)] {
        &self.pairs
    }
}
