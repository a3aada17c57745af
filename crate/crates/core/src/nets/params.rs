use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseArray, ParamId, Tape, Var};

/// Named trainable arrays. A parameter's [`ParamId`] is its insertion index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, `fan_in = shape[0]`.
    pub fn add_weight<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        let bound = 1.0 / (shape[0] as f64).sqrt();
        let value = DenseArray::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, DenseArray::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DenseArray)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn count_values(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    /// Registers parameter `id` on `tape`.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, &self.values[id.0])
    }
}
