//! Named parameter storage.
//!
//! Parameters live outside any tape as flat `f64` buffers keyed by a
//! hierarchical name ("cfar.b0.opt.mca.wq", ...). Each training step
//! registers them onto a fresh tape; gradients are read back by name.
//! The `BTreeMap` keeps every iteration — Adam updates, checkpoint
//! serialization, gradient collection — in lexicographic name order, so
//! all of them are deterministic.

use std::collections::BTreeMap;

use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>, shape: Vec<usize>) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "param {name}: shape/value mismatch");
        assert!(
            self.map
                .insert(name.to_string(), Param { values, shape })
                .is_none(),
            "duplicate param {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing param {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing param {name}"))
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

    /// Iterate in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    /// Register every parameter on a tape as a differentiable input.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.map {
            let id = tape
                .param(p.values.clone(), p.shape.clone())
                .expect("stored param has consistent shape");
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.values.len()).sum()
    }

    /// Overwrite a parameter's values with zeros (test and ablation aid).
    pub fn zero(&mut self, name: &str) {
        let p = self.get_mut(name);
        p.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Tape ids for one registration of a [`ParamStore`].
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("param {name} not bound"))
    }

    /// Collect gradients by name after a backward pass; parameters the
    /// loss did not reach get zero vectors.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = tape
                    .grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.values(id).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Xavier-uniform limit for a matrix with the given fan-in and fan-out.
pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Insert a Xavier-uniform matrix parameter.
pub fn init_matrix(store: &mut ParamStore, rng: &mut Rng, name: &str, rows: usize, cols: usize) {
    let a = xavier_limit(rows, cols);
    store.insert(name, rng.uniform_vec(rows * cols, -a, a), vec![rows, cols]);
}

/// Insert a zero vector parameter (biases, layer-norm shifts).
pub fn init_zeros(store: &mut ParamStore, name: &str, n: usize) {
    store.insert(name, vec![0.0; n], vec![n]);
}

/// Insert a ones vector parameter (layer-norm gains).
pub fn init_ones(store: &mut ParamStore, name: &str, n: usize) {
    store.insert(name, vec![1.0; n], vec![n]);
}

/// Insert an embedding table with small normal entries.
pub fn init_embedding(store: &mut ParamStore, rng: &mut Rng, name: &str, rows: usize, cols: usize) {
    store.insert(name, rng.normal_vec(rows * cols, 0.02), vec![rows, cols]);
}
