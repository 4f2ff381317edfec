//! Named parameter storage and tape binding.

use super::tape::{Gradients, Tape, Var};
use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Ordered map of named parameter arrays. Registration order is stable, so a
/// fixed seed yields a fixed initialization.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Loads parameters onto a tape. Trainable bindings create leaves (so
    /// gradients are tracked); inference bindings create constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let v = if trainable {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Binding { vars }
    }
}

/// Parameter-name to tape-variable map for one forward pass.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Extracts gradients for all bound parameters that received one.
    pub fn collect_grads(&self, grads: &mut Gradients) -> HashMap<String, ArrayD<f64>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    ArrayD::from_shape_fn(shape, |_| dist.sample(rng))
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(shape, |_| dist.sample(rng))
}
