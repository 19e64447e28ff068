//! Named parameter registry.
//!
//! Parameters live in one flat store; modules hold `ParamId` handles.
//! Creation order is the canonical enumeration order, which keeps optimizer
//! updates and checkpoint layout deterministic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: String, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(invalid("parameter name", format!("duplicate '{name}'")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id.0);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.trainable[id.0]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, v), &t)| (n.as_str(), v, t))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Dotted name prefix used while wiring up module trees.
#[derive(Clone, Debug)]
pub struct Scope(String);

impl Scope {
    pub fn root(name: &str) -> Self {
        Scope(name.to_string())
    }

    pub fn sub(&self, name: &str) -> Scope {
        Scope(format!("{}.{}", self.0, name))
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.0, leaf)
    }
}

/// Uniform init over [-bound, bound].
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Kaiming-style uniform init with bound 1/sqrt(fan_in).
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / crate::mathf::sqrtf(fan_in.max(1) as f32);
    uniform_init(rng, shape, bound)
}
