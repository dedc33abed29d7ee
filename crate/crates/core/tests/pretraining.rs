mod common;

use polyadapt::config::{ModelConfig, RunConfig};
use polyadapt::data::Corpus;
use polyadapt::eval::edit_distance;
use polyadapt::model::{build_model, AblationVariant};
use polyadapt::pretrain::{pretrain_decoder, pretrain_encoder, DecoderPretrainer, PretrainRecord};

fn short_run(steps: usize) -> RunConfig {
    let mut cfg = common::tiny_run();
    cfg.pretrain.enc_steps = steps;
    cfg.pretrain.dec_steps = steps;
    cfg.pretrain.peak_lr = 3e-3;
    cfg
}

/// Default model width on the tiny corpus layout.
fn desk_run(steps: usize) -> RunConfig {
    let mut cfg = short_run(steps);
    let tiny = cfg.model.clone();
    cfg.model = ModelConfig {
        num_languages: tiny.num_languages,
        vocab_size: tiny.vocab_size,
        feature_dim: tiny.feature_dim,
        ..ModelConfig::default()
    };
    cfg
}

fn mean_main(recs: &[PretrainRecord]) -> f64 {
    recs.iter().map(|r| r.main).sum::<f64>() / recs.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn initial_contrastive_loss_is_near_uniform() {
    let cfg = desk_run(1);
    let corpus = common::tiny_corpus(6);
    let k = cfg.pretrain.n_negatives as f64;
    let first: Vec<f64> = (0..3)
        .map(|seed| pretrain_encoder(&corpus, &cfg, seed, |_| {}).unwrap().log[0].main)
        .collect();
    let ratio = median(first.clone()) / (k + 1.0).ln();
    assert!((0.8..=1.2).contains(&ratio), "step-1 losses {first:?} are {ratio:.2} x ln(K+1)");
}

/// Median over three seeds of (first-quarter mean, last-quarter mean).
fn loss_drop(corpus: &Corpus, cfg: &RunConfig, encoder: bool) -> (f64, f64) {
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let log = if encoder {
            pretrain_encoder(corpus, cfg, seed, |_| {}).unwrap().log
        } else {
            pretrain_decoder(corpus, cfg, seed, |_| {}).unwrap().log
        };
        let q = log.len() / 4;
        first.push(mean_main(&log[..q]));
        last.push(mean_main(&log[log.len() - q..]));
    }
    (median(first), median(last))
}

#[test]
fn pretraining_losses_decrease() {
    let cfg = short_run(80);
    let corpus = common::tiny_corpus(6);
    for encoder in [true, false] {
        let (first, last) = loss_drop(&corpus, &cfg, encoder);
        assert!(last < first, "encoder={encoder}: {first} -> {last}");
    }
}

#[test]
fn denoising_reconstructs_better_than_chance() {
    let cfg = desk_run(300);
    let corpus = common::tiny_corpus(6);
    let ck = pretrain_decoder(&corpus, &cfg, 1, |_| {}).unwrap().checkpoint;
    let mut m = DecoderPretrainer::<f32>::new(&cfg.model, 0).unwrap();
    for id in m.params.ids() {
        let name = m.params.info(id).name.clone();
        m.params.get_mut(id).data_mut().copy_from_slice(ck.tensor(&name).unwrap().data());
    }
    let (mut errors, mut total) = (0usize, 0usize);
    for i in 0..40 {
        let (lang, text) = corpus.text(i);
        let target = corpus.vocab.target(lang, &text).unwrap();
        let want = &target[1..target.len() - 1];
        let got = m.greedy(&target, target[0], want.len() + 8).unwrap();
        errors += edit_distance(want, &got).dist;
        total += want.len();
    }
    let accuracy = 1.0 - errors as f64 / total as f64;
    assert!(accuracy > 1.0 / cfg.model.vocab_size as f64, "accuracy {accuracy}");
}

#[test]
fn pretrained_checkpoints_feed_the_ladder_and_rerun_identically() {
    let cfg = short_run(5);
    let corpus = common::tiny_corpus(6);
    let enc = pretrain_encoder(&corpus, &cfg, 3, |_| {}).unwrap().checkpoint;
    let dec = pretrain_decoder(&corpus, &cfg, 3, |_| {}).unwrap().checkpoint;
    assert_eq!(enc.to_bytes(), pretrain_encoder(&corpus, &cfg, 3, |_| {}).unwrap().checkpoint.to_bytes());
    assert_eq!(dec.to_bytes(), pretrain_decoder(&corpus, &cfg, 3, |_| {}).unwrap().checkpoint.to_bytes());
    assert_ne!(enc.to_bytes(), pretrain_encoder(&corpus, &cfg, 4, |_| {}).unwrap().checkpoint.to_bytes());
    for variant in AblationVariant::ALL {
        let model = build_model(&cfg.model, variant, Some(&enc), Some(&dec), 1).unwrap();
        if variant.needs_encoder_ckpt() {
            let name = "enc.layers.0.ffn.fc1.weight";
            assert_eq!(model.params.by_name(name).unwrap().data(), enc.tensor(name).unwrap().data());
        }
        if variant.needs_decoder_ckpt() {
            let name = "dec.embed.weight";
            assert_eq!(model.params.by_name(name).unwrap().data(), dec.tensor(name).unwrap().data());
        }
    }
}
