use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::data::MASK;
use crate::params::fnv1a;

/// Text corruption of the denoising objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub deletion_prob: f64,
    /// Probability that a position starts an infilled span.
    pub infill_prob: f64,
    /// Poisson mean of infilled span lengths (0-length spans insert a mask).
    pub infill_mean_span: f64,
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig {
        deletion_prob: 0.0,
        infill_prob: 0.0,
        infill_mean_span: 0.0,
    };
}

/// Deletes tokens and replaces spans by a single mask token. At least one
/// input token always survives: when every token would be lost, the first
/// one is put back in front.
pub fn corrupt_text(tokens: &[usize], noise: &NoiseConfig, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(format!("noise:{seed}").as_bytes()));
    let spans = (noise.infill_mean_span > 0.0).then(|| Poisson::new(noise.infill_mean_span).expect("positive mean"));
    let mut out = Vec::with_capacity(tokens.len() + 1);
    let mut kept = 0;
    let mut i = 0;
    while i < tokens.len() {
        if noise.infill_prob > 0.0 && rng.gen::<f64>() < noise.infill_prob {
            let len = spans.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            out.push(MASK);
            i += len;
            continue;
        }
        if noise.deletion_prob > 0.0 && rng.gen::<f64>() < noise.deletion_prob {
            i += 1;
            continue;
        }
        out.push(tokens[i]);
        kept += 1;
        i += 1;
    }
    if kept == 0 && !tokens.is_empty() {
        out.insert(0, tokens[0]);
    }
    out
}
