//! Named parameter storage with provenance tags.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Grads, ParamId};
use crate::tensor::{Float, Tensor};

/// What part of the architecture a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Shared,
    CrossAttention,
    /// Rank-k scale or bias factors of one language.
    LangFactor(usize),
    /// Serial adapter of one language.
    Adapter(usize),
    /// Only used by a pretraining objective (codebook, mask embedding, ...).
    PretrainOnly,
}

impl Role {
    pub fn is_language_specific(self) -> bool {
        matches!(self, Role::LangFactor(_) | Role::Adapter(_))
    }

    pub fn language(self) -> Option<usize> {
        match self {
            Role::LangFactor(l) | Role::Adapter(l) => Some(l),
            _ => None,
        }
    }
}

/// Where the current value of a parameter came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Fresh,
    EncoderCheckpoint,
    DecoderCheckpoint,
}

impl Origin {
    pub fn is_pretrained(self) -> bool {
        !matches!(self, Origin::Fresh)
    }
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub role: Role,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            info: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a trainable parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>, role: Role) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        t.set_requires_grad(true);
        let id = self.tensors.len();
        self.tensors.push(t);
        self.by_name.insert(name.clone(), id);
        self.info.push(ParamInfo {
            name,
            role,
            origin: Origin::Fresh,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.info[id]
    }

    pub fn set_origin(&mut self, id: ParamId, origin: Origin) {
        self.info[id].origin = origin;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.tensors.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamInfo, &Tensor<T>)> {
        self.info.iter().zip(&self.tensors)
    }

    /// Ids of parameters that currently require gradients.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&i| self.tensors[i].requires_grad()).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable()
            .into_iter()
            .map(|i| self.info[i].name.clone())
            .collect()
    }

    /// Total scalar count over the given ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&i| self.tensors[i].len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Adds parameter gradients from one backward pass.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (pid, g) in grads.params() {
            if self.tensors[pid].requires_grad() {
                self.tensors[pid].accumulate_grad(g);
            }
        }
    }

    /// Deep copy with precision conversion; grads are dropped.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            info: self.info.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

/// 64-bit FNV-1a, used to derive per-parameter RNG streams from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG stream owned by a single named parameter. Initial values do not
/// depend on which other parameters exist or on creation order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Xavier-uniform `[fan_in, fan_out]` matrix.
pub fn xavier<T: Float>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    let mut rng = param_rng(seed, name);
    let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

pub fn normal<T: Float>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std >= 0");
    let mut rng = param_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_name_and_seed() {
        let a: Tensor<f32> = xavier(7, "enc.layers.0.ffn.fc1.weight", 4, 8);
        let b: Tensor<f32> = xavier(7, "enc.layers.0.ffn.fc1.weight", 4, 8);
        let c: Tensor<f32> = xavier(7, "enc.layers.0.ffn.fc2.weight", 4, 8);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn new_params_are_trainable() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros(&[2]), Role::Shared);
        assert!(s.get(id).requires_grad());
        assert_eq!(s.trainable(), vec![id]);
    }
}
