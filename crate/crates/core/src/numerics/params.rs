//! Named parameter storage and tape binding.
//!
//! Parameters live in a `ParamSet` keyed by dotted names. Each training step
//! registers the parameters it touches as tape leaves through a `Bindings`
//! map, runs backward, and folds the leaf gradients into a `GradStore`.
//!
//! Initialization draws from a stream derived from `(seed, name)`, so adding
//! or removing a parameter never perturbs the init of the others. That is
//! what lets a model grown from a checkpoint (new head groups, say) keep the
//! shared weights bit-identical.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::rng::{derive_seed, SeedRng};

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    /// Inserts a tensor drawn from normal(0, std) under a name-derived stream.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f32, seed: u64) {
        let mut rng = SeedRng::new(derive_seed(seed, name));
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gaussian() * std).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f32) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), alloc::vec![v; n]));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Copies values for every name present in both sets; returns the copied
    /// names. Shapes must agree on shared names.
    pub fn load_shared(&mut self, other: &ParamSet) -> Vec<String> {
        let mut loaded = Vec::new();
        for (name, tensor) in &other.entries {
            if let Some(dst) = self.entries.get_mut(name) {
                assert_eq!(
                    dst.shape(),
                    tensor.shape(),
                    "shape mismatch loading shared parameter {name}"
                );
                *dst = tensor.clone();
                loaded.push(name.clone());
            }
        }
        loaded
    }
}

/// Accumulated gradients per parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f32>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: &[f32]) {
        match self.grads.get_mut(name) {
            Some(slot) => {
                debug_assert_eq!(slot.len(), grad.len());
                for (s, &g) in slot.iter_mut().zip(grad) {
                    *s += g;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

/// Per-tape map from parameter names to leaf vars.
#[derive(Debug, Default)]
pub struct Bindings {
    map: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose names start with any of these prefixes bind as
    /// constants: they receive no gradient and are skipped by updates.
    pub fn with_frozen_prefixes(prefixes: &[String]) -> Self {
        Self {
            map: BTreeMap::new(),
            frozen_prefixes: prefixes.to_vec(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Registers (once) and returns the tape leaf for a named parameter.
    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, name: &str) -> Var {
        if let Some(v) = self.map.get(name) {
            return *v;
        }
        let tensor = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let requires_grad = !self.is_frozen(name);
        let var = tape.leaf(tensor, requires_grad);
        self.map.insert(name.to_string(), var);
        var
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Folds tape gradients for all bound, unfrozen parameters into `store`.
    pub fn collect_grads(&self, tape: &Tape, store: &mut GradStore) {
        for (name, var) in &self.map {
            if self.is_frozen(name) {
                continue;
            }
            if let Some(g) = tape.grad(*var) {
                store.accumulate(name, g);
            }
        }
    }

    /// Names bound as frozen in this tape.
    pub fn frozen_bound(&self) -> BTreeSet<String> {
        self.map
            .keys()
            .filter(|n| self.is_frozen(n))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_order_independent() {
        let mut a = ParamSet::new();
        a.init_normal("x", &[4], 0.02, 7);
        a.init_normal("y", &[4], 0.02, 7);

        let mut b = ParamSet::new();
        b.init_normal("y", &[4], 0.02, 7);
        b.init_normal("z", &[4], 0.02, 7);
        b.init_normal("x", &[4], 0.02, 7);

        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("y"), b.get("y"));
    }

    #[test]
    fn load_shared_copies_intersection_only() {
        let mut src = ParamSet::new();
        src.init_normal("dec.w", &[2, 2], 0.02, 1);
        src.init_normal("heads.mix", &[2], 0.02, 1);
        let mut dst = ParamSet::new();
        dst.init_normal("dec.w", &[2, 2], 0.02, 99);
        dst.init_normal("heads.track", &[2], 0.02, 99);
        let before_track = dst.get("heads.track").unwrap().clone();
        let loaded = dst.load_shared(&src);
        assert_eq!(loaded, alloc::vec!["dec.w".to_string()]);
        assert_eq!(dst.get("dec.w"), src.get("dec.w"));
        assert_eq!(dst.get("heads.track").unwrap(), &before_track);
    }

    #[test]
    fn frozen_bindings_collect_no_grads() {
        let mut params = ParamSet::new();
        params.init_normal("cond.w", &[1, 2], 0.5, 3);
        params.init_normal("dec.w", &[2, 1], 0.5, 3);
        let mut tape = Tape::new();
        let mut binds = Bindings::with_frozen_prefixes(&["cond.".to_string()]);
        let c = binds.bind(&mut tape, &params, "cond.w");
        let d = binds.bind(&mut tape, &params, "dec.w");
        let y = tape.matmul(c, d);
        let loss = tape.reshape(y, alloc::vec![]);
        tape.backward(loss);
        let mut store = GradStore::new();
        binds.collect_grads(&tape, &mut store);
        assert!(store.get("cond.w").is_none());
        assert!(store.get("dec.w").is_some());
    }
}
