use serde::Serialize;

use crate::config::ModelConfig;

/// Extra scalars each language adds under the two adaptation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LanguageParamCounts {
    pub adapter_per_lang: usize,
    pub factorized_per_lang: usize,
}

/// Closed-form per-language parameter counts for `config`.
///
/// Adapters: `d·h + h·d + h + d` plus a `2d` pre-norm per adapted layer.
/// Factorized: `(k_scale + k_bias)·(m + n)` per adapted `m×n` matrix.
pub fn count_language_params(config: &ModelConfig) -> LanguageParamCounts {
    let adapter_per_lang =
        config.adapter_layers() * adapter_params(config.d_model, config.adapter_hidden, true);
    let factorized_per_lang =
        factorized_params(&config.adapted_matrices(), config.k_scale, config.k_bias);
    LanguageParamCounts {
        adapter_per_lang,
        factorized_per_lang,
    }
}

/// Scalars of one adapter: two projections, their biases, optionally the norm.
pub fn adapter_params(d: usize, h: usize, with_norm: bool) -> usize {
    d * h + h * d + h + d + if with_norm { 2 * d } else { 0 }
}

/// Scalars of the rank-k scale and bias factors over a matrix inventory.
pub fn factorized_params(matrices: &[(usize, usize)], k_scale: usize, k_bias: usize) -> usize {
    matrices.iter().map(|(m, n)| (k_scale + k_bias) * (m + n)).sum()
}
