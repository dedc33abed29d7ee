//! Check bodies shared by the per-area suites and the acceptance report.
//! Each panics on violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyadapt::autodiff::Reduction;
use polyadapt::config::{DataConfig, ModelConfig, RunConfig};
use polyadapt::data::{Batch, Corpus, Utterance};
use polyadapt::eval::{decode, edit_distance, score, DecodeOptions};
use polyadapt::layers::{materialize_factorized, AdaptiveLinear, Forward};
use polyadapt::model::{build_model, AblationVariant, Checkpoint, Model};
use polyadapt::params::{ParamStore, Role};
use polyadapt::tensor::{Float, Tensor};
use polyadapt::train::{accumulate, Schedule, Trainer};

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Exponential reference recursion.
pub fn lev(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = lev(ra, rb) + usize::from(x != y);
            sub.min(lev(ra, b) + 1).min(lev(a, rb) + 1)
        }
    }
}

pub fn loss_of(model: &Model<f32>, corpus: &Corpus, lang: usize) -> f64 {
    let batch = super::lang_batch(corpus, lang, 3);
    let mut fx = Forward::new(&model.params);
    let loss = model.loss(&mut fx, &batch, 0.1, Reduction::Mean).unwrap();
    fx.g.item(loss) as f64
}

pub fn logits_of(model: &Model<f32>, corpus: &Corpus, lang: usize) -> Vec<f32> {
    let batch = super::lang_batch(corpus, lang, 3);
    let mut fx = Forward::new(&model.params);
    let (logits, _) = model.logits(&mut fx, &batch).unwrap();
    fx.g.value(logits).to_vec()
}

/// Checkpoints built from a different seed than the model so loaded and
/// fresh values are distinguishable.
pub fn setup() -> (RunConfig, Checkpoint, Checkpoint) {
    let cfg = super::tiny_run();
    let (enc, dec) = super::fresh_checkpoints(&cfg, 99);
    (cfg, enc, dec)
}

/// Default tiers with fewer utterances.
pub fn small() -> DataConfig {
    DataConfig {
        medium_count: 200,
        low_count: 50,
        very_low_count: 20,
        ..DataConfig::default()
    }
}

/// No dropout, no smoothing.
pub fn quiet<T: Float>(model: &mut Model<T>) {
    model.config.dropout = 0.0;
    model.config.label_smoothing = 0.0;
}

pub fn batch_of(utts: &[&Utterance]) -> Batch {
    Batch::new(utts).unwrap()
}

pub fn materialize_matches_outer_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (m, n, k) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=4));
        let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..k)
            .map(|_| {
                let r = Tensor::from_f64(&[m], &rand_vec(&mut rng, m)).unwrap();
                let s = Tensor::from_f64(&[n], &rand_vec(&mut rng, n)).unwrap();
                (r, s)
            })
            .collect();
        let got = materialize_factorized(&pairs, k).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want = pairs.iter().fold(0.0, |acc, (r, s)| acc + r.data()[i] * s.data()[j]);
                assert_eq!(got.data()[i * n + j], want);
            }
        }
    }
}

pub fn adaptive_linear_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (din, dout, ks, kb) = (3, 4, 2, 3);
    let mut store = ParamStore::<f64>::new();
    let mut lin = AdaptiveLinear::new(&mut store, "lin", din, dout, 7, Role::Shared);
    lin.add_factors(&mut store, "lin", 2, ks, kb, 7);
    for id in store.ids() {
        let n = store.get(id).len();
        let v = rand_vec(&mut rng, n);
        store.get_mut(id).data_mut().copy_from_slice(&v);
    }
    let x = rand_vec(&mut rng, 2 * din);
    let w = store.get(lin.w).data().to_vec();
    let bias = store.get(lin.b).data().to_vec();
    for lang in 0..2 {
        let set = &lin.factors.as_ref().unwrap().langs[lang];
        let (sr, ss) = set.scale.unwrap();
        let (br, bs) = set.bias.unwrap();
        let (sr, ss, br, bs) = (store.get(sr).data(), store.get(ss).data(), store.get(br).data(), store.get(bs).data());
        let mut fx = Forward::new(&store);
        let xv = fx.g.leaf(&Tensor::from_f64(&[2, din], &x).unwrap(), false);
        let y = lin.forward(&mut fx, xv, lang).unwrap();
        for row in 0..2 {
            for j in 0..dout {
                let mut s = bias[j];
                for i in 0..din {
                    let scale: f64 = (0..ks).map(|k| sr[i * ks + k] * ss[k * dout + j]).sum();
                    let add: f64 = (0..kb).map(|k| br[i * kb + k] * bs[k * dout + j]).sum();
                    s += x[row * din + i] * (w[i * dout + j] * scale + add);
                }
                assert!(close(fx.g.value(y)[row * dout + j], s, 1e-6), "lang {lang}");
            }
        }
    }
}

pub fn only_the_batch_language_receives_gradient() {
    let cfg = super::tiny_run();
    let corpus = super::tiny_corpus(11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in [AblationVariant::Wma, AblationVariant::Wmf] {
        let model = Model::<f32>::new(&cfg.model, variant, 3).unwrap();
        for _ in 0..10 {
            let lang = rng.gen_range(0..corpus.langs.len());
            let batch = super::lang_batch(&corpus, lang, 3);
            let mut fx = Forward::new(&model.params);
            let loss = model.loss(&mut fx, &batch, 0.1, Reduction::Mean).unwrap();
            let grads = fx.g.backward(loss).unwrap();
            let mut own = 0.0f64;
            for (id, gr) in grads.params() {
                match model.params.info(id).role.language() {
                    Some(l) if l != lang => {
                        assert!(gr.iter().all(|&v| v == 0.0), "{}", model.params.info(id).name)
                    }
                    Some(_) => own = own.max(gr.iter().fold(0.0, |m, &v| m.max(v.abs() as f64))),
                    None => {}
                }
            }
            assert!(own > 0.0, "{variant}: the batch language got no gradient");
        }
    }
}

pub fn schedule_peaks_and_decays() {
    let cfg = polyadapt::config::TrainConfig::default();
    let s = Schedule::from_config(&cfg).unwrap();
    let w = cfg.warmup_steps;
    assert_eq!(s.lr_at_step(w).unwrap(), 0.001);
    assert!(close(s.lr_at_step(4 * w).unwrap(), 0.0005, 1e-15));
    for step in 1..w {
        assert!(s.lr_at_step(step).unwrap() < s.lr_at_step(step + 1).unwrap());
    }
    for step in w..cfg.total_updates + 1000 {
        assert!(s.lr_at_step(step).unwrap() > s.lr_at_step(step + 1).unwrap());
    }
}

pub fn edit_distance_equals_recursion_on_200_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let a: Vec<u8> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..3)).collect();
        let b: Vec<u8> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..3)).collect();
        let e = edit_distance(&a, &b);
        assert_eq!(e.dist, lev(&a, &b), "{a:?} {b:?}");
        assert_eq!(e.dist, e.sub + e.del + e.ins);
    }
}

pub fn identity_initialized_variants_match_wm_at_step_zero() {
    let (cfg, enc, dec) = setup();
    let corpus = super::tiny_corpus(3);
    let wm = build_model(&cfg.model, AblationVariant::Wm, Some(&enc), Some(&dec), 1).unwrap();
    for variant in [AblationVariant::Wmf, AblationVariant::Wma, AblationVariant::Fwmf, AblationVariant::Fwma] {
        let model = build_model(&cfg.model, variant, Some(&enc), Some(&dec), 1).unwrap();
        for lang in 0..corpus.langs.len() {
            let (a, b) = (loss_of(&wm, &corpus, lang), loss_of(&model, &corpus, lang));
            assert!((a - b).abs() < 1e-6, "{variant} lang {lang}: {a} vs {b}");
        }
    }
}

pub fn checkpoint_round_trip_preserves_the_forward_pass() {
    let (cfg, enc, dec) = setup();
    let corpus = super::tiny_corpus(3);
    for variant in [AblationVariant::Tf, AblationVariant::Wmf, AblationVariant::Fwma] {
        let model = build_model(&cfg.model, variant, Some(&enc), Some(&dec), 1).unwrap();
        let bytes = model.to_checkpoint().to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.variant, variant);
        assert_eq!(logits_of(&model, &corpus, 1), logits_of(&back, &corpus, 1));
    }
}

pub fn generation_is_reproducible_and_survives_disk() {
    let a = Corpus::generate(&small(), 16, 7).unwrap();
    let b = Corpus::generate(&small(), 16, 7).unwrap();
    let c = Corpus::generate(&small(), 16, 8).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.checksum(), a.checksum());
    let other = tempfile::tempdir().unwrap();
    b.write(other.path()).unwrap();
    for name in ["train.tsv", "dev.tsv", "test.tsv"] {
        let x = std::fs::read(dir.path().join(name)).unwrap();
        let y = std::fs::read(other.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

/// Frozen variants keep a random output projection here, which caps how
/// confident a prediction can get; they must still decode exactly.
pub fn every_variant_memorizes_a_single_utterance() {
    let mut cfg = super::tiny_run();
    let tiny = cfg.model.clone();
    cfg.model = ModelConfig {
        num_languages: tiny.num_languages,
        vocab_size: tiny.vocab_size,
        feature_dim: tiny.feature_dim,
        ..ModelConfig::default()
    };
    let corpus = super::tiny_corpus(4);
    let (enc, dec) = super::fresh_checkpoints(&cfg, 8);
    let utt = corpus.train.iter().filter(|u| u.lang == 0).min_by_key(|u| u.tokens.len()).unwrap();
    let batch = batch_of(&[utt]);
    for variant in AblationVariant::ALL {
        let mut model = build_model(&cfg.model, variant, Some(&enc), Some(&dec), 2).unwrap();
        quiet(&mut model);
        let mut trainer = Trainer::new(&model, Schedule::new(3e-3, 20, 200).unwrap(), 2);
        let first = trainer.update(&mut model, &[&batch]).unwrap().loss;
        let mut last = first;
        for _ in 1..200 {
            last = trainer.update(&mut model, &[&batch]).unwrap().loss;
        }
        if variant.is_frozen() {
            assert!(last < 0.1 * first, "{variant}: loss {first} -> {last}");
        } else {
            assert!(last < 0.1, "{variant}: final loss {last}");
        }
        let opts = DecodeOptions::greedy(cfg.eval.max_len);
        let hyp = &decode(&model, &[utt], &opts).unwrap()[0];
        assert_eq!(hyp.tokens, utt.tokens[1..utt.tokens.len() - 1], "{variant}");
        let (report, _) = score(&model, &corpus.langs, &corpus.vocab, &[utt], &opts, "train").unwrap();
        assert_eq!(report.overall(), 0.0, "{variant}");
    }
}

pub fn accumulating_two_micro_batches_equals_one_double_batch() {
    let cfg = super::tiny_run();
    let corpus = super::tiny_corpus(4);
    let utts: Vec<&Utterance> = corpus.train.iter().filter(|u| u.lang == 1).take(8).collect();
    let micro: Vec<Batch> = utts.chunks(2).map(batch_of).collect();
    let merged: Vec<Batch> = utts.chunks(4).map(batch_of).collect();

    let mut base = Model::<f32>::new(&cfg.model, AblationVariant::Wmf, 2).unwrap().cast::<f64>();
    quiet(&mut base);
    let schedule = Schedule::new(1e-3, 2, 10).unwrap();
    let (mut a, mut b) = (base.clone(), base);
    let mut ta = Trainer::new(&a, schedule.clone(), 2);
    let mut tb = Trainer::new(&b, schedule, 2);
    let sa = accumulate(&mut a, &mut ta, &micro, 2).unwrap();
    let sb = accumulate(&mut b, &mut tb, &merged, 1).unwrap();
    assert_eq!(sa.len(), 2);
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.tokens, y.tokens);
        assert!((x.loss - y.loss).abs() < 1e-6, "{} vs {}", x.loss, y.loss);
        assert!((x.grad_norm - y.grad_norm).abs() < 1e-6);
    }
    for id in a.params.ids() {
        let diff = a
            .params
            .get(id)
            .data()
            .iter()
            .zip(b.params.get(id).data())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-6, "{}: {diff}", a.params.info(id).name);
    }
    // an incomplete trailing group is dropped
    let mut c = Model::<f32>::new(&cfg.model, AblationVariant::Tf, 2).unwrap();
    let mut tc = Trainer::new(&c, Schedule::new(1e-3, 2, 10).unwrap(), 2);
    assert_eq!(accumulate(&mut c, &mut tc, &micro[..3], 2).unwrap().len(), 1);
    assert!(accumulate(&mut c, &mut tc, &micro, 0).is_err());
}
