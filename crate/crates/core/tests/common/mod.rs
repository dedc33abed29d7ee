#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;

use polyadapt::config::{DataConfig, ModelConfig, RunConfig};
use polyadapt::data::{Batch, Corpus, Utterance, Vocab};
use polyadapt::model::Checkpoint;
use polyadapt::pretrain::{DecoderPretrainer, EncoderPretrainer};

pub fn tiny_data() -> DataConfig {
    DataConfig {
        medium_langs: 2,
        low_langs: 1,
        very_low_langs: 1,
        medium_count: 60,
        low_count: 30,
        very_low_count: 12,
        unlabeled_factor: 2,
        text_factor: 2,
        ..DataConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 2,
        dec_layers: 1,
        text_enc_layers: 1,
        ffn_dim: 32,
        num_languages: 4,
        vocab_size: Vocab::size_for(4),
        adapter_hidden: 4,
        k_bias: 2,
        feature_dim: 8,
        rel_window: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        model: tiny_model(),
        data: tiny_data(),
        ..RunConfig::default()
    };
    cfg.train.frame_budget = 400;
    cfg.train.warmup_steps = 10;
    cfg.train.total_updates = 20;
    cfg.train.eval_interval = 10;
    cfg.train.dev_per_lang = 4;
    cfg.pretrain.frame_budget = 300;
    cfg.pretrain.text_batch = 8;
    cfg.pretrain.codebook_size = 8;
    cfg.pretrain.warmup_steps = 5;
    cfg.eval.max_len = 24;
    cfg.eval.max_per_lang = 4;
    cfg
}

pub fn tiny_corpus(seed: u64) -> Corpus {
    let cfg = tiny_run();
    Corpus::generate(&cfg.data, cfg.model.feature_dim, seed).unwrap()
}

/// Untrained pretraining checkpoints with the right tensor inventory.
pub fn fresh_checkpoints(cfg: &RunConfig, seed: u64) -> (Checkpoint, Checkpoint) {
    let enc = EncoderPretrainer::<f32>::new(&cfg.model, &cfg.pretrain, seed).unwrap().to_checkpoint();
    let dec = DecoderPretrainer::<f32>::new(&cfg.model, seed).unwrap().to_checkpoint();
    (enc, dec)
}

/// First `n` training utterances of language `lang` as one batch.
pub fn lang_batch(corpus: &Corpus, lang: usize, n: usize) -> Batch {
    let utts: Vec<&Utterance> = corpus.train.iter().filter(|u| u.lang == lang).take(n).collect();
    Batch::new(&utts).unwrap()
}

/// TF column of the published results table: (language, tier, WER).
pub const PUBLISHED_TF: [(&str, &str, f64); 32] = [
    ("de", "medium", 10.4),
    ("nl", "medium", 13.2),
    ("fr", "medium", 15.2),
    ("it", "medium", 11.5),
    ("fa", "medium", 5.5),
    ("pl", "medium", 11.5),
    ("pt", "medium", 14.0),
    ("es", "medium", 10.9),
    ("ru", "medium", 10.0),
    ("ta", "medium", 28.6),
    ("th", "medium", 2.8),
    ("ro", "low", 18.1),
    ("ar", "low", 21.1),
    ("et", "low", 30.4),
    ("ja", "low", 13.0),
    ("zh", "low", 25.9),
    ("cs", "low", 19.8),
    ("lt", "low", 43.3),
    ("tr", "low", 10.4),
    ("id", "low", 14.0),
    ("mn", "low", 49.8),
    ("sv", "low", 24.7),
    ("uk", "low", 14.0),
    ("lv", "very_low", 41.9),
    ("vi", "very_low", 49.5),
    ("ka", "very_low", 58.6),
    ("sl", "very_low", 20.5),
    ("fi", "very_low", 54.2),
    ("hi", "very_low", 46.1),
    ("gl", "very_low", 26.5),
    ("ur", "very_low", 78.0),
    ("kk", "very_low", 86.5),
];

/// Printed tier averages and overall of that column.
pub const PUBLISHED_TF_AVERAGES: [f64; 4] = [12.1, 23.7, 51.3, 30.0];

pub fn published_tf_inputs() -> (Vec<(String, f64)>, std::collections::HashMap<String, polyadapt::data::Tier>) {
    use polyadapt::data::Tier;
    let per_lang = PUBLISHED_TF.iter().map(|(l, _, w)| (l.to_string(), *w)).collect();
    let tiers = PUBLISHED_TF
        .iter()
        .map(|(l, t, _)| {
            let tier = match *t {
                "medium" => Tier::Medium,
                "low" => Tier::Low,
                _ => Tier::VeryLow,
            };
            (l.to_string(), tier)
        })
        .collect();
    (per_lang, tiers)
}
