//! Adam with a stepped learning-rate decay.

use super::params::ParamStore;
use super::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.65,
            decay_every: 40,
        }
    }
}

impl AdamConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

pub struct AdamState<E: Real> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Real> AdamState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let m = store
            .ids()
            .map(|id| vec![E::ZERO; store.value(id).len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held in `store`, at the given
    /// epoch's learning rate. Gradients are not cleared here.
    pub fn step(&mut self, store: &mut ParamStore<E>, config: &AdamConfig, epoch: usize) {
        self.t += 1;
        let lr = E::from_f64(config.lr_at_epoch(epoch));
        let b1 = E::from_f64(config.beta1);
        let b2 = E::from_f64(config.beta2);
        let eps = E::from_f64(config.eps);
        let one = E::ONE;
        let bc1 = E::from_f64(1.0 - config.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - config.beta2.powi(self.t as i32));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            // Split borrows: copy grad out of the store row by row is wasteful;
            // instead walk by index.
            let n = store.value(id).len();
            for i in 0..n {
                let g = store.grad(id)[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                store.value_mut(id)[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
