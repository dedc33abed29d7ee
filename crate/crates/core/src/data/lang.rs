use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::params::param_rng;

/// Resource tier of a language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    VeryLow,
    Low,
    Medium,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Medium, Tier::Low, Tier::VeryLow];

    pub fn label(self) -> &'static str {
        match self {
            Tier::VeryLow => "very_low",
            Tier::Low => "low",
            Tier::Medium => "medium",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One synthetic language: which letters it writes, which emission symbol
/// each letter sounds like, and the words it uses.
#[derive(Clone, Debug, PartialEq)]
pub struct LangSpec {
    pub id: usize,
    pub tag: String,
    pub tier: Tier,
    pub count: usize,
    pub alphabet: Vec<char>,
    /// `cipher[i]` is the emission symbol of `alphabet[i]`.
    pub cipher: Vec<usize>,
    pub lexicon: Vec<String>,
    pub repeat: (usize, usize),
    pub noise_std: f64,
    pub char_scored: bool,
}

impl LangSpec {
    pub fn symbol_of(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|&a| a == c).map(|i| self.cipher[i])
    }

    pub fn letter_of(&self, symbol: usize) -> Option<char> {
        self.cipher.iter().position(|&s| s == symbol).map(|i| self.alphabet[i])
    }
}

/// The shared "acoustic" space: a fixed random embedding of every emission
/// symbol (plus one silence symbol used for word gaps).
#[derive(Clone, Debug, PartialEq)]
pub struct Acoustics {
    pub feature_dim: usize,
    /// `[symbols + 1, feature_dim]`, last row is silence.
    pub projection: Vec<f64>,
    pub symbols: usize,
}

impl Acoustics {
    pub fn new(symbols: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = param_rng(seed, "data.projection");
        let n = Normal::new(0.0, 1.0).unwrap();
        let projection = (0..(symbols + 1) * feature_dim).map(|_| n.sample(&mut rng)).collect();
        Self {
            feature_dim,
            projection,
            symbols,
        }
    }

    pub fn silence(&self) -> usize {
        self.symbols
    }

    pub fn row(&self, symbol: usize) -> &[f64] {
        &self.projection[symbol * self.feature_dim..(symbol + 1) * self.feature_dim]
    }

    /// Nearest emission symbol (silence included) by squared distance.
    pub fn nearest(&self, frame: &[f32]) -> usize {
        (0..=self.symbols)
            .map(|s| {
                let d: f64 = self.row(s).iter().zip(frame).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                (s, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(s, _)| s)
            .unwrap()
    }
}

fn check(cfg: &DataConfig) -> Result<()> {
    let err = |m: String| Err(Error::Config(m));
    if !(8..=26).contains(&cfg.alphabet_size) {
        return err(format!("data.alphabet_size must be in 8..=26, got {}", cfg.alphabet_size));
    }
    if cfg.emission_symbols < cfg.alphabet_size {
        return err("data.emission_symbols must be at least data.alphabet_size".into());
    }
    for (name, lo, hi) in [
        ("word_len", cfg.word_len_min, cfg.word_len_max),
        ("words", cfg.words_min, cfg.words_max),
        ("repeat", cfg.repeat_min, cfg.repeat_max),
    ] {
        if lo == 0 || lo > hi {
            return err(format!("data.{name}_min must be in 1..=data.{name}_max"));
        }
    }
    if cfg.num_languages() == 0 {
        return err("the corpus needs at least one language".into());
    }
    let tiers = [
        ("medium", cfg.medium_langs, cfg.medium_count),
        ("low", cfg.low_langs, cfg.low_count),
        ("very_low", cfg.very_low_langs, cfg.very_low_count),
    ];
    for (name, langs, count) in tiers {
        if langs > 0 && count < 10 {
            return err(format!("data.{name}_count is {count}; each tier needs at least 10 utterances to split"));
        }
    }
    let present: Vec<_> = tiers.iter().filter(|t| t.1 > 0).collect();
    if present.windows(2).any(|w| w[0].2 <= w[1].2) {
        return err("tier sizes must strictly decrease: medium > low > very_low".into());
    }
    if cfg.train_frac <= 0.0 || cfg.dev_frac <= 0.0 || cfg.train_frac + cfg.dev_frac >= 1.0 {
        return err("data.train_frac and data.dev_frac must be positive and leave room for test".into());
    }
    if cfg.noise_std < 0.0 {
        return err("data.noise_std must be >= 0".into());
    }
    Ok(())
}

fn make_word(rng: &mut ChaCha8Rng, alphabet: &[char], len: usize) -> String {
    let mut w = String::with_capacity(len);
    let mut prev = None;
    while w.len() < len {
        let c = *alphabet.choose(rng).unwrap();
        if Some(c) != prev {
            w.push(c);
            prev = Some(c);
        }
    }
    w
}

/// Deterministic language inventory for a data config: medium tier first
/// (`m1..`), then low (`l1..`), then very low (`v1..`).
pub fn language_specs(cfg: &DataConfig, seed: u64) -> Result<Vec<LangSpec>> {
    check(cfg)?;
    let char_scored = cfg.char_scored_tags();
    let letters: Vec<char> = ('a'..='z').collect();
    let mut specs: Vec<LangSpec> = Vec::new();
    let tiers = [
        (Tier::Medium, "m", cfg.medium_langs, cfg.medium_count),
        (Tier::Low, "l", cfg.low_langs, cfg.low_count),
        (Tier::VeryLow, "v", cfg.very_low_langs, cfg.very_low_count),
    ];
    for (tier, prefix, n, count) in tiers {
        for i in 0..n {
            let tag = format!("{prefix}{}", i + 1);
            let mut rng = param_rng(seed, &format!("data.lang.{tag}"));
            let mut alphabet: Vec<char> = letters.choose_multiple(&mut rng, cfg.alphabet_size).copied().collect();
            alphabet.sort_unstable();
            let symbols: Vec<usize> = (0..cfg.emission_symbols).collect();
            let cipher = loop {
                let c: Vec<usize> = symbols.choose_multiple(&mut rng, cfg.alphabet_size).copied().collect();
                let clash = specs.iter().any(|s| s.alphabet == alphabet && s.cipher == c);
                if !clash {
                    break c;
                }
            };
            // Tiny alphabets may not have enough distinct words; duplicates
            // are accepted after a bounded number of draws.
            let mut lexicon = Vec::with_capacity(cfg.lexicon_size);
            let mut draws = 0;
            while lexicon.len() < cfg.lexicon_size {
                let len = rng.gen_range(cfg.word_len_min..=cfg.word_len_max);
                let w = make_word(&mut rng, &alphabet, len);
                draws += 1;
                if !lexicon.contains(&w) || draws > 100 * cfg.lexicon_size {
                    lexicon.push(w);
                }
            }
            specs.push(LangSpec {
                id: specs.len(),
                char_scored: char_scored.contains(&tag),
                tag,
                tier,
                count,
                alphabet,
                cipher,
                lexicon,
                repeat: (cfg.repeat_min, cfg.repeat_max),
                noise_std: cfg.noise_std,
            });
        }
    }
    Ok(specs)
}
