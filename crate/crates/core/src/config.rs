//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers for `model`, `data`, `train`, `pretrain` and `eval`.
//!
//! Every key has a default; unknown keys and unparsable values are errors.
//! `#` starts a comment. Keys may also be written fully qualified
//! (`train.peak_lr = 0.001`) outside any section.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

fn parse_value<V: FromStr>(section: &str, key: &str, raw: &str) -> Result<V> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: cannot parse {raw:?}")))
}

/// Declares a config section: struct, defaults, setter and emitter.
macro_rules! section {
    (
        $(#[$meta:meta])*
        $name:ident, $label:literal {
            $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            pub const SECTION: &'static str = $label;

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = parse_value($label, key, raw)?, )*
                    _ => return Err(Error::Config(format!("unknown key {}.{key}", $label))),
                }
                Ok(())
            }

            /// All keys with their current values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($field), self.$field.to_string()), )* ]
            }

            /// `(key, doc)` for every key.
            pub fn docs() -> Vec<(&'static str, &'static str)> {
                vec![ $( (stringify!($field), concat!($($doc),*)), )* ]
            }
        }
    };
}

section! {
    /// Architecture hyperparameters. Defaults are the desk-scale toy model.
    ModelConfig, "model" {
        /// Hidden size of every transformer stack.
        d_model: usize = 64,
        /// Attention heads; must divide d_model.
        n_heads: usize = 4,
        /// Acoustic encoder layers.
        enc_layers: usize = 4,
        /// Decoder layers.
        dec_layers: usize = 2,
        /// Text-encoder layers of the denoising pretrainer (also what stacking appends).
        text_enc_layers: usize = 2,
        /// Feed-forward inner size.
        ffn_dim: usize = 256,
        /// Shared vocabulary size (specials + characters + language tags).
        vocab_size: usize = 106,
        /// Number of languages with their own adaptive parameters.
        num_languages: usize = 8,
        /// Adapter bottleneck width.
        adapter_hidden: usize = 32,
        /// Rank of the per-language scale factors.
        k_scale: usize = 1,
        /// Rank of the per-language bias factors.
        k_bias: usize = 8,
        /// Relative-position self-attention in the acoustic encoder.
        rel_pos: bool = false,
        /// Relative distances are clipped to [-rel_window, rel_window].
        rel_window: usize = 64,
        /// Append the pretrained text-encoder layers after the acoustic encoder.
        stack_text_encoder: bool = false,
        /// Total temporal downsampling of the convolutional front end.
        conv_downsample_factor: usize = 2,
        /// Input frame feature dimension.
        feature_dim: usize = 16,
        /// Dropout probability during training.
        dropout: f64 = 0.1,
        /// Label smoothing of the training cross-entropy.
        label_smoothing: f64 = 0.1,
        /// Layer-norm epsilon.
        ln_eps: f64 = 1e-5,
    }
}

section! {
    /// Synthetic corpus generation.
    DataConfig, "data" {
        /// Languages in the medium tier.
        medium_langs: usize = 3,
        /// Languages in the low tier.
        low_langs: usize = 3,
        /// Languages in the very-low tier.
        very_low_langs: usize = 2,
        /// Utterances per medium language.
        medium_count: usize = 10000,
        /// Utterances per low language.
        low_count: usize = 1000,
        /// Utterances per very-low language.
        very_low_count: usize = 100,
        /// Fraction of each language's utterances in train.
        train_frac: f64 = 0.8,
        /// Fraction in dev (test gets the rest).
        dev_frac: f64 = 0.1,
        /// Letters per language alphabet (>= 8).
        alphabet_size: usize = 10,
        /// Size of the shared emission-symbol inventory (excluding silence).
        emission_symbols: usize = 16,
        /// Words per language lexicon.
        lexicon_size: usize = 48,
        /// Minimum word length in characters.
        word_len_min: usize = 2,
        /// Maximum word length in characters.
        word_len_max: usize = 4,
        /// Minimum words per sentence.
        words_min: usize = 1,
        /// Maximum words per sentence.
        words_max: usize = 3,
        /// Minimum frames emitted per character.
        repeat_min: usize = 2,
        /// Maximum frames emitted per character.
        repeat_max: usize = 4,
        /// Gaussian noise added to every frame feature.
        noise_std: f64 = 0.6,
        /// Unlabeled frame pool size as a multiple of the labeled corpus.
        unlabeled_factor: usize = 10,
        /// Text-only pool size as a multiple of the labeled corpus.
        text_factor: usize = 10,
        /// Comma-separated language tags scored by characters instead of words.
        char_scored: String = String::new(),
    }
}

section! {
    /// Supervised fine-tuning.
    TrainConfig, "train" {
        /// Peak learning rate, reached at the end of warmup.
        peak_lr: f64 = 1e-3,
        /// Linear warmup updates.
        warmup_steps: usize = 500,
        /// Total optimizer updates.
        total_updates: usize = 5000,
        /// Micro-batches summed per update.
        accumulation: usize = 1,
        /// Global gradient-norm clip.
        clip_norm: f64 = 1.0,
        /// Maximum padded frames per micro-batch.
        frame_budget: usize = 1200,
        /// Updates between dev evaluations.
        eval_interval: usize = 250,
        /// Dev utterances per language used for periodic evaluation.
        dev_per_lang: usize = 16,
        /// Language sampling exponent: batches drawn with probability proportional to size^alpha.
        lang_alpha: f64 = 0.5,
    }
}

section! {
    /// Self-supervised pretraining of the two halves.
    PretrainConfig, "pretrain" {
        /// Optimizer updates for contrastive encoder pretraining.
        enc_steps: usize = 800,
        /// Optimizer updates for denoising decoder pretraining.
        dec_steps: usize = 800,
        /// Peak learning rate for both pretrainers.
        peak_lr: f64 = 1e-3,
        /// Warmup updates for both pretrainers.
        warmup_steps: usize = 100,
        /// Maximum padded frames per encoder-pretraining batch.
        frame_budget: usize = 1200,
        /// Sentences per denoising batch.
        text_batch: usize = 24,
        /// Probability that a frame starts a masked span.
        mask_prob: f64 = 0.15,
        /// Masked span length in downsampled frames.
        span_len: usize = 3,
        /// Distractors per masked position.
        n_negatives: usize = 10,
        /// Cosine-similarity temperature.
        temperature: f64 = 0.1,
        /// Codebook entries.
        codebook_size: usize = 32,
        /// Weight of the codebook/commitment term.
        commit_weight: f64 = 0.1,
        /// Token deletion probability.
        deletion_prob: f64 = 0.1,
        /// Probability that a position starts an infilled span.
        infill_prob: f64 = 0.1,
        /// Mean infilled span length.
        infill_mean_span: f64 = 2.0,
    }
}

section! {
    /// Decoding and reporting.
    EvalConfig, "eval" {
        /// greedy or beam
        mode: String = "greedy".to_string(),
        /// Beam width for beam mode.
        beam_width: usize = 4,
        /// Maximum generated tokens (after the language tag).
        max_len: usize = 48,
        /// Length-normalization exponent for beam scores.
        length_penalty: f64 = 1.0,
        /// Test utterances per language (0 = all).
        max_per_lang: usize = 40,
    }
}

/// The complete, resolved configuration of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn set(&mut self, section: &str, key: &str, raw: &str) -> Result<()> {
        match section {
            "" if key == "seed" => self.seed = parse_value("", key, raw)?,
            "model" => self.model.set(key, raw)?,
            "data" => self.data.set(key, raw)?,
            "train" => self.train.set(key, raw)?,
            "pretrain" => self.pretrain.set(key, raw)?,
            "eval" => self.eval.set(key, raw)?,
            "" => return Err(Error::Config(format!("key {key} outside any section"))),
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: bad section header", no + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            match key.split_once('.') {
                Some((sec, k)) if section.is_empty() => self.set(sec, k, value)?,
                _ => self.set(&section, key, value)?,
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fully resolved config text; `parse(emit())` reproduces `self`.
    pub fn emit(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        let sections: [(&str, Vec<(&str, String)>); 5] = [
            (ModelConfig::SECTION, self.model.entries()),
            (DataConfig::SECTION, self.data.entries()),
            (TrainConfig::SECTION, self.train.entries()),
            (PretrainConfig::SECTION, self.pretrain.entries()),
            (EvalConfig::SECTION, self.eval.entries()),
        ];
        for (name, entries) in sections {
            let _ = writeln!(out, "\n[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.emit()).map_err(|e| Error::io(path, e))
    }

    /// Markdown table of every key and its default, for documentation.
    pub fn reference() -> String {
        let d = Self::default();
        let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
        let _ = writeln!(out, "| seed | 0 | base seed of the run |");
        let rows: [(&str, Vec<(&str, String)>, Vec<(&str, &str)>); 5] = [
            ("model", d.model.entries(), ModelConfig::docs()),
            ("data", d.data.entries(), DataConfig::docs()),
            ("train", d.train.entries(), TrainConfig::docs()),
            ("pretrain", d.pretrain.entries(), PretrainConfig::docs()),
            ("eval", d.eval.entries(), EvalConfig::docs()),
        ];
        for (sec, entries, docs) in rows {
            for ((k, v), (_, doc)) in entries.into_iter().zip(docs) {
                let _ = writeln!(out, "| {sec}.{k} | {v} | {} |", doc.trim());
            }
        }
        out
    }
}

impl ModelConfig {
    /// Large configuration: 1024-wide, 24 encoder / 8 decoder layers, relative
    /// attention, 512-wide adapters.
    pub fn large_scale() -> Self {
        Self {
            d_model: 1024,
            n_heads: 16,
            enc_layers: 24,
            dec_layers: 8,
            text_enc_layers: 12,
            ffn_dim: 4096,
            adapter_hidden: 512,
            k_scale: 1,
            k_bias: 8,
            rel_pos: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("num_languages", self.num_languages),
            ("adapter_hidden", self.adapter_hidden),
            ("conv_downsample_factor", self.conv_downsample_factor),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k_scale == 0 && self.k_bias == 0 {
            return Err(Error::Config("k_scale and k_bias cannot both be zero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must be in [0, 1)".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("model.ln_eps must be > 0".into()));
        }
        Ok(())
    }

    /// `(in, out)` shapes of every projection that receives language
    /// factors, in layer order.
    pub fn adapted_matrices(&self) -> Vec<(usize, usize)> {
        let (d, f) = (self.d_model, self.ffn_dim);
        let enc_layer = [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)];
        let dec_layer = [(d, d); 8].into_iter().chain([(d, f), (f, d)]);
        let mut out = Vec::new();
        let enc_like = self.enc_layers + if self.stack_text_encoder { self.text_enc_layers } else { 0 };
        for _ in 0..enc_like {
            out.extend(enc_layer);
        }
        for _ in 0..self.dec_layers {
            out.extend(dec_layer.clone());
        }
        out
    }

    /// Layers that carry one adapter each.
    pub fn adapter_layers(&self) -> usize {
        self.enc_layers
            + self.dec_layers
            + if self.stack_text_encoder { self.text_enc_layers } else { 0 }
    }

    /// Key/value echo stored in checkpoints.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect()
    }

    pub fn from_echo(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if let Some(key) = k.strip_prefix("model.") {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

impl DataConfig {
    pub fn num_languages(&self) -> usize {
        self.medium_langs + self.low_langs + self.very_low_langs
    }

    pub fn char_scored_tags(&self) -> Vec<String> {
        self.char_scored
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_parse_round_trip() {
        let mut cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        cfg.model.rel_pos = true;
        cfg.train.peak_lr = 5e-4;
        cfg.data.char_scored = "m3".into();
        let back = RunConfig::parse(&cfg.emit()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_and_dotted_keys() {
        let cfg = RunConfig::parse(
            "seed = 3\ntrain.warmup_steps = 10 # comment\n[model]\nd_model = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.warmup_steps, 10);
        assert_eq!(cfg.model.d_model, 32);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("[nope]\nx = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nd_model = big\n").is_err());
    }

    #[test]
    fn every_key_is_documented() {
        for (k, doc) in ModelConfig::docs()
            .into_iter()
            .chain(DataConfig::docs())
            .chain(TrainConfig::docs())
            .chain(PretrainConfig::docs())
            .chain(EvalConfig::docs())
        {
            assert!(!doc.trim().is_empty(), "{k} has no doc");
        }
    }

    #[test]
    fn model_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::large_scale().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
