//! Building blocks: plain and language-adaptive projections, adapters,
//! attention, normalization.

mod adapter;
mod attention;
mod count;
mod factorized;

pub use adapter::{Adapter, AdapterParams};
pub use attention::{MultiHeadAttention, RelPosParams};
pub use count::{adapter_params, count_language_params, factorized_params, LanguageParamCounts};
pub use factorized::{materialize_factorized, AdaptiveLinear, FactorSet, LanguageFactors};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::Result;
use crate::params::{xavier, ParamStore, Role};
use crate::tensor::{Float, Tensor};

/// Index of a language in the shared language list.
pub type LangId = usize;

/// One forward pass: the graph being recorded plus read access to the
/// parameters. Each parameter is copied into the graph at most once.
pub struct Forward<'p, T: Float> {
    pub g: Graph<T>,
    params: &'p ParamStore<T>,
    cache: Vec<Option<Var>>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'p, T: Float> Forward<'p, T> {
    /// Inference pass: no dropout.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            params,
            cache: vec![None; params.len()],
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training pass with dropout driven by `seed`.
    pub fn training(params: &'p ParamStore<T>, dropout: f64, seed: u64) -> Self {
        let mut f = Self::new(params);
        if dropout > 0.0 {
            f.dropout = dropout;
            f.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        f
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id] {
            return v;
        }
        let v = self.g.param_leaf(id, self.params.get(id));
        self.cache[id] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) => self.g.dropout(x, self.dropout, rng),
            None => x,
        }
    }
}

/// Shared (non-adaptive) affine projection `y = x W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, seed: u64, role: Role) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(seed, &format!("{name}.weight"), d_in, d_out), role);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), role);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = fx.p(self.w);
        let b = fx.p(self.b);
        let y = fx.g.matmul(x, w)?;
        fx.g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, eps: f64, role: Role) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[d]), role);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), role);
        Self { gamma, beta, eps }
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var) -> Result<Var> {
        let g = fx.p(self.gamma);
        let b = fx.p(self.beta);
        fx.g.layer_norm(x, g, b, self.eps)
    }
}

/// Position-wise feed-forward block with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: AdaptiveLinear,
    pub fc2: AdaptiveLinear,
}

impl FeedForward {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, ffn: usize, seed: u64, role: Role) -> Self {
        Self {
            fc1: AdaptiveLinear::new(store, &format!("{name}.fc1"), d, ffn, seed, role),
            fc2: AdaptiveLinear::new(store, &format!("{name}.fc2"), ffn, d, seed, role),
        }
    }

    pub fn add_factors<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, langs: usize, k_scale: usize, k_bias: usize, seed: u64) {
        self.fc1.add_factors(store, &format!("{name}.fc1"), langs, k_scale, k_bias, seed);
        self.fc2.add_factors(store, &format!("{name}.fc2"), langs, k_scale, k_bias, seed);
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, lang: LangId) -> Result<Var> {
        let h = self.fc1.forward(fx, x, lang)?;
        let h = fx.g.gelu(h);
        let h = fx.dropout(h);
        self.fc2.forward(fx, h, lang)
    }
}
