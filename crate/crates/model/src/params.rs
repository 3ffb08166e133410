//! Named parameter tensors, seeded initialization and the Adam optimizer.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::Gradients;
use crate::tensor::{Float, Shape, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Ordered set of named tensors owned by one network.
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    lookup: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    /// Snapshot with the same identity, so ids held by a network stay valid.
    /// Do not use a store and its clone in one graph.
    fn clone(&self) -> Self {
        ParamStore {
            id: self.id,
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new((**v).clone())).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; names are fixed by the network builders.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let index = self.values.len();
        self.lookup.insert(name.clone(), index);
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId { store: self.id, index }
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.id, "parameter id belongs to a different store");
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        self.check(id);
        &self.values[id.index]
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.check(id);
        self.values[id.index].clone()
    }

    /// Copy-on-write access; graphs holding the old value keep it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.check(id);
        Rc::make_mut(&mut self.values[id.index])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&index| ParamId { store: self.id, index })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|index| ParamId { store: self.id, index })
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.check(id);
        &self.names[id.index]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Same names and values in another precision, under a fresh identity.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.iter() {
            out.add(name, v.cast());
        }
        out
    }

    /// FNV-1a over names, shapes and value bits. Used to assert that a step left a network untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, v) in self.iter() {
            name.bytes().for_each(|b| eat(b as u64));
            v.shape().iter().for_each(|&d| eat(d as u64));
            v.data().iter().for_each(|x| eat(x.as_f64().to_bits()));
        }
        h
    }
}

/// Seeded initializer. Values are drawn in `f64` so `f32` and `f64` builds agree.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Float>(&mut self, shape: Shape, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(std * self.rng.sample::<f64, _>(StandardNormal)))
    }

    /// He-normal for a layer with the given fan-in.
    pub fn he<T: Float>(&mut self, shape: Shape, fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moments for one parameter store, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter that received a gradient. Returns how many were updated.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> usize {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let step_size = T::from_f64(c.learning_rate / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(c.epsilon);
        let ids: Vec<ParamId> = store.ids().collect();
        let mut updated = 0;
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {i}");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
            updated += 1;
        }
        updated
    }
}
