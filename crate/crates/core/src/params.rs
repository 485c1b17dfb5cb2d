//! Named parameter collections shared by every trainable model.
//!
//! A model owns a [`ParamSet`]; each forward pass binds the parameters onto a
//! fresh tape (as grad-requiring leaves) and reads gradients back by name.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Tape, Tensor, TensorId};

/// Ordered collection of named tensors. Order is the storage contract: model
/// documents and optimizer state follow it.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name.to_string(), tensor));
    }

    pub fn insert_gaussian<R: Rng>(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
            .collect();
        self.insert(name, Tensor::new(shape, values));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![value; n]));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter {name:?}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter {name:?}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Merges another set under a prefix; used by mixtures to pool component
    /// parameters.
    pub fn adopt(&mut self, prefix: &str, other: &ParamSet) {
        for (name, t) in other.iter() {
            self.insert(&format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Extracts the sub-set stored under a prefix, stripping it.
    pub fn extract(&self, prefix: &str) -> ParamSet {
        let dot = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(&dot) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Binds every parameter onto the tape; `trainable` decides per name
    /// whether the bound leaf requires grad.
    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamBinding {
        let mut ids = HashMap::new();
        for (name, t) in &self.entries {
            let mut leaf = t.clone();
            leaf.requires_grad = trainable(name);
            ids.insert(name.clone(), tape.leaf(leaf));
        }
        ParamBinding { ids }
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        self.bind_with(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamBinding {
        self.bind_with(tape, |_| false)
    }
}

/// Tape ids of one bound parameter set.
pub struct ParamBinding {
    ids: HashMap<String, TensorId>,
}

impl ParamBinding {
    /// Binding from an explicit name-to-id map; test harnesses use this to
    /// drive model forwards with externally bound leaves.
    pub fn from_map(ids: HashMap<String, TensorId>) -> Self {
        ParamBinding { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, &i)| (n.as_str(), i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adopt_extract_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut inner = ParamSet::new();
        inner.insert_gaussian("w", vec![2, 3], 0.1, &mut rng);
        inner.insert_zeros("b", vec![3]);
        let mut outer = ParamSet::new();
        outer.adopt("comp0", &inner);
        let back = outer.extract("comp0");
        assert_eq!(back.get("w").values, inner.get("w").values);
        assert_eq!(back.num_scalars(), 9);
    }

    #[test]
    fn bind_with_freezes_selected() {
        let mut ps = ParamSet::new();
        ps.insert_const("a", vec![2], 1.0);
        ps.insert_const("b", vec![2], 2.0);
        let mut tape = Tape::new();
        let binding = ps.bind_with(&mut tape, |n| n == "a");
        assert!(tape.value(binding.id("a")).requires_grad);
        assert!(!tape.value(binding.id("b")).requires_grad);
    }
}
