mod common;

use polyadapt::data::Utterance;
use polyadapt::eval::{decode, DecodeMode, DecodeOptions};
use polyadapt::model::{AblationVariant, Model};
use polyadapt::train::fit;

/// A briefly trained model, so decoding is not degenerate.
fn trained() -> (Model<f32>, polyadapt::data::Corpus) {
    let mut cfg = common::tiny_run();
    cfg.train.total_updates = 60;
    cfg.train.eval_interval = 60;
    cfg.train.peak_lr = 3e-3;
    let corpus = common::tiny_corpus(9);
    let mut model = Model::<f32>::new(&cfg.model, AblationVariant::Tf, 1).unwrap();
    fit(&mut model, &corpus, &cfg, 1, |_| {}).unwrap();
    (model, corpus)
}

fn beam(width: usize, max_len: usize) -> DecodeOptions {
    DecodeOptions {
        mode: DecodeMode::Beam,
        beam_width: width,
        max_len,
        length_penalty: 1.0,
    }
}

#[test]
fn beam_of_width_one_is_greedy() {
    let (model, corpus) = trained();
    let utts: Vec<&Utterance> = corpus.dev.iter().take(12).collect();
    let g = decode(&model, &utts, &DecodeOptions::greedy(30)).unwrap();
    let b = decode(&model, &utts, &beam(1, 30)).unwrap();
    for (x, y) in g.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(x.truncated, y.truncated);
        assert!((x.log_prob - y.log_prob).abs() < 1e-9);
    }
}

#[test]
fn decoding_is_deterministic_and_batch_independent() {
    let (model, corpus) = trained();
    let utts: Vec<&Utterance> = corpus.test.iter().take(10).collect();
    for opts in [DecodeOptions::greedy(30), beam(3, 30)] {
        let all = decode(&model, &utts, &opts).unwrap();
        assert_eq!(all, decode(&model, &utts, &opts).unwrap());
        for (u, h) in utts.iter().zip(&all) {
            let alone = &decode(&model, &[*u], &opts).unwrap()[0];
            assert_eq!(alone.tokens, h.tokens);
        }
    }
}

#[test]
fn hypotheses_respect_the_length_limit() {
    let (model, corpus) = trained();
    let utts: Vec<&Utterance> = corpus.dev.iter().take(6).collect();
    for opts in [DecodeOptions::greedy(2), beam(2, 2)] {
        for h in decode(&model, &utts, &opts).unwrap() {
            assert!(h.tokens.len() <= 2);
            assert!(h.truncated || h.tokens.len() < 2);
            assert!(h.log_prob <= 0.0);
        }
    }
}
