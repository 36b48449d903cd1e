//! Named trainable parameters with deterministic initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::NumError;

/// A flat store of named parameter arrays. Ordered by name so every iteration
/// (gradient reduction, Adam updates, checkpoints) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.map.iter_mut()
    }

    /// Insert a parameter initialized from N(0, std^2).
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite");
        let data: Vec<f64> = (0..n).map(|_| rng.sample(dist)).collect();
        self.insert(name, Array::from_vec(shape, data).expect("shape/data agree"));
    }

    /// Insert a parameter filled with a constant (e.g. LN gains, biases).
    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Array::filled(shape, v));
    }
}

/// Bias-corrected Adam state over a parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
}

impl AdamState {
    pub fn new(lr: f64) -> AdamState {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Standard bias-corrected Adam update. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array>,
    ) -> Result<(), NumError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                NumError::Invalid(format!("adam: unknown parameter '{name}'"))
            })?;
            if p.shape() != g.shape() {
                return Err(NumError::ShapeMismatch {
                    node: format!("adam:{name}"),
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
