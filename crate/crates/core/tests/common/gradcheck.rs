//! Reverse-mode gradients against central finite differences at f64.
//! Every case returns the worst relative error it saw and panics past
//! the tolerance.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyadapt::autodiff::{AttnMask, ParamId, Reduction, Var};
use polyadapt::config::{ModelConfig, PretrainConfig};
use polyadapt::layers::{Adapter, AdaptiveLinear, Forward, MultiHeadAttention};
use polyadapt::params::{ParamStore, Role};
use polyadapt::pretrain::contrastive::contrastive_loss;
use polyadapt::pretrain::EncoderPretrainer;
use polyadapt::tensor::Tensor;

pub const CASES: u64 = 20;
pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Coordinates probed per parameter tensor.
const PROBES: usize = 24;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize) -> usize {
    rng.gen_range(lo..=8)
}

/// Projects `out` onto fixed random weights so every output element
/// contributes to the scalar.
fn project(fx: &mut Forward<f64>, out: Var, seed: u64) -> Var {
    let shape = fx.g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(&mut rng, &shape, 1.0);
    let w = fx.g.constant(&shape, w.into_data());
    let y = fx.g.mul(out, w).unwrap();
    fx.g.sum(y)
}

fn evaluate(store: &ParamStore<f64>, build: &dyn Fn(&mut Forward<f64>) -> Var) -> (f64, HashMap<ParamId, Vec<f64>>) {
    let mut fx = Forward::new(store);
    let loss = build(&mut fx);
    let value = fx.g.item(loss);
    let grads = fx.g.backward(loss).unwrap();
    (value, grads.params().map(|(id, g)| (id, g.to_vec())).collect())
}

fn value(store: &ParamStore<f64>, build: &dyn Fn(&mut Forward<f64>) -> Var) -> f64 {
    let mut fx = Forward::new(store);
    let loss = build(&mut fx);
    fx.g.item(loss)
}

/// Compares analytic and numeric gradients of every parameter in `store`
/// on a random subset of coordinates. Returns the worst relative error.
fn check(store: &mut ParamStore<f64>, build: &dyn Fn(&mut Forward<f64>) -> Var, seed: u64) -> f64 {
    let (_, analytic) = evaluate(store, build);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut largest: f64 = 0.0;
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.gen_range(0..n)).collect()
        };
        let zeros = vec![0.0; n];
        let a = analytic.get(&id).unwrap_or(&zeros);
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for &i in &coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let up = value(store, build);
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let down = value(store, build);
            store.get_mut(id).data_mut()[i] = orig;
            num.push((up - down) / (2.0 * STEP));
            ana.push(a[i]);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(ana.iter().map(|x| x * x).sum::<f64>().sqrt());
        let rel = if scale < 1e-7 { diff } else { diff / scale };
        assert!(rel < TOL, "{}: relative error {rel:e}", store.info(id).name);
        worst = worst.max(rel);
        largest = largest.max(scale);
    }
    assert!(largest > 1e-6, "every probed gradient vanished");
    worst
}

/// Replaces every parameter value by a random one so no gradient is
/// trivially zero.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids() {
        let shape = store.get(id).shape().to_vec();
        let t = random(rng, &shape, scale);
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
}

pub fn matmul_and_batched_matmul() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1));
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[m, k], 1.0), Role::Shared);
        let b = store.add("b", random(&mut rng, &[k, n], 1.0), Role::Shared);
        let c = store.add("c", random(&mut rng, &[2, m, k], 1.0), Role::Shared);
        let d = store.add("d", random(&mut rng, &[2, n, k], 1.0), Role::Shared);
        worst = worst.max(check(
            &mut store,
            &|fx| {
                let (a, b, c, d) = (fx.p(a), fx.p(b), fx.p(c), fx.p(d));
                let ab = fx.g.matmul(a, b).unwrap();
                let cd = fx.g.bmm(c, d, true).unwrap();
                let l1 = project(fx, ab, seed);
                let l2 = project(fx, cd, seed + 1);
                fx.g.add(l1, l2).unwrap()
            },
            seed,
        ));
    }
    worst
}

pub fn layer_norm() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, d) = (dim(&mut rng, 1), dim(&mut rng, 2));
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, &[r, d], 2.0), Role::Shared);
        let g = store.add("gamma", random(&mut rng, &[d], 1.5), Role::Shared);
        let b = store.add("beta", random(&mut rng, &[d], 1.0), Role::Shared);
        worst = worst.max(check(
            &mut store,
            &|fx| {
                let (x, g, b) = (fx.p(x), fx.p(g), fx.p(b));
                let y = fx.g.layer_norm(x, g, b, 1e-5).unwrap();
                project(fx, y, seed)
            },
            seed,
        ));
    }
    worst
}

pub fn softmax_and_cross_entropy() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, v) = (dim(&mut rng, 1), dim(&mut rng, 2));
        let targets: Vec<Option<usize>> = (0..rows)
            .map(|i| if i > 0 && rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..v)) })
            .collect();
        let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
        let (tq, tk) = (dim(&mut rng, 1), dim(&mut rng, 1));
        let lens = [rng.gen_range(1..=tk), tk];
        let mask = AttnMask::new(&lens, tq, tk, seed % 3 == 0);
        let mut store = ParamStore::new();
        let logits = store.add("logits", random(&mut rng, &[rows, v], 3.0), Role::Shared);
        let scores = store.add("scores", random(&mut rng, &[2, tq, tk], 3.0), Role::Shared);
        worst = worst.max(check(
            &mut store,
            &|fx| {
                let l = fx.p(logits);
                let ce = fx.g.cross_entropy(l, &targets, smoothing, Reduction::Mean).unwrap();
                let s = fx.p(scores);
                let p = fx.g.masked_softmax(s, Some(&mask)).unwrap();
                let sp = project(fx, p, seed);
                fx.g.add(ce, sp).unwrap()
            },
            seed,
        ));
    }
    worst
}

pub fn adaptive_linear() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, din, dout) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1));
        let (ks, kb) = (rng.gen_range(1..=3), rng.gen_range(0..=3));
        let mut store = ParamStore::new();
        let mut lin = AdaptiveLinear::new(&mut store, "lin", din, dout, seed, Role::Shared);
        lin.add_factors(&mut store, "lin", 2, ks, kb, seed);
        let x = store.add("x", random(&mut rng, &[b, din], 1.0), Role::Shared);
        scramble(&mut store, &mut rng, 1.0);
        let lang = (seed % 2) as usize;
        worst = worst.max(check(
            &mut store,
            &|fx| {
                let xv = fx.p(x);
                let y = lin.forward(fx, xv, lang).unwrap();
                project(fx, y, seed)
            },
            seed,
        ));
    }
    worst
}

pub fn adapter() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, d, h) = (dim(&mut rng, 1), dim(&mut rng, 2), dim(&mut rng, 1));
        let mut store = ParamStore::new();
        let ad = Adapter::new(&mut store, "ad", d, h, 2, 1e-5, seed);
        let x = store.add("x", random(&mut rng, &[b, d], 1.0), Role::Shared);
        scramble(&mut store, &mut rng, 1.0);
        let lang = (seed % 2) as usize;
        worst = worst.max(check(
            &mut store,
            &|fx| {
                let xv = fx.p(x);
                let y = ad.forward(fx, xv, lang).unwrap();
                project(fx, y, seed)
            },
            seed,
        ));
    }
    worst
}

fn attention_case(seed: u64, relative: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..=2);
    let d = heads * rng.gen_range(1..=8 / heads);
    let (b, tq, tk) = (2, dim(&mut rng, 1), dim(&mut rng, 1));
    let mut store = ParamStore::new();
    let mut att = MultiHeadAttention::new(&mut store, "att", d, heads, seed, Role::Shared).unwrap();
    if relative {
        att.add_relative(&mut store, "att", rng.gen_range(1..=3), seed, Role::Shared);
    }
    if seed % 2 == 1 {
        att.add_factors(&mut store, "att", 2, 1, 2, seed);
    }
    let xq = store.add("xq", random(&mut rng, &[b, tq, d], 1.0), Role::Shared);
    let xkv = store.add("xkv", random(&mut rng, &[b, tk, d], 1.0), Role::Shared);
    scramble(&mut store, &mut rng, 0.8);
    let lens = [rng.gen_range(1..=tk), tk];
    let mask = AttnMask::new(&lens, tq, tk, false);
    // relative attention is self-attention over one sequence
    let same = relative;
    check(
        &mut store,
        &|fx| {
            let q = fx.p(xq);
            let kv = if same { q } else { fx.p(xkv) };
            let m = if same { AttnMask::new(&[lens[0].min(tq), tq], tq, tq, false) } else { mask.clone() };
            let y = att.forward(fx, q, kv, Some(&m), 1).unwrap();
            project(fx, y, seed)
        },
        seed,
    )
}

pub fn absolute_attention() -> f64 {
    (0..CASES).map(|seed| attention_case(seed, false)).fold(0.0, f64::max)
}

pub fn relative_attention() -> f64 {
    (0..CASES).map(|seed| attention_case(seed, true)).fold(0.0, f64::max)
}

pub fn contrastive_against_detached_codebook() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, t, d) = (2, rng.gen_range(3..=8), dim(&mut rng, 2));
        let codes = rng.gen_range(2..=8);
        let codebook = random(&mut rng, &[codes, d], 1.0);
        let assign: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..codes)).collect();
        let masks: Vec<Vec<bool>> = (0..b)
            .map(|_| {
                let mut m: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.5)).collect();
                m[0] = true;
                m[1] = true;
                m
            })
            .collect();
        let negatives = rng.gen_range(1..=4);
        let temperature = rng.gen_range(0.1..1.0);
        let mut store = ParamStore::new();
        let ctx = store.add("context", random(&mut rng, &[b, t, d], 1.0), Role::Shared);
        worst = worst.max(check(
            &mut store,
            &|fx| {
                let c = fx.p(ctx);
                let cb = fx.g.constant(&[codes, d], codebook.data().to_vec());
                let q = fx.g.gather_rows(cb, &assign, &[b, t, d]).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                contrastive_loss(&mut fx.g, c, q, &masks, negatives, temperature, &mut r).unwrap().loss
            },
            seed,
        ));
    }
    worst
}

pub fn contrastive_through_the_encoder() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            ffn_dim: 8,
            feature_dim: 4,
            dropout: 0.0,
            rel_pos: seed % 2 == 1,
            rel_window: 3,
            ..ModelConfig::default()
        };
        let pcfg = PretrainConfig {
            n_negatives: 3,
            span_len: 2,
            mask_prob: 0.3,
            codebook_size: 4,
            ..PretrainConfig::default()
        };
        let pt = EncoderPretrainer::<f64>::new(&config, &pcfg, seed).unwrap();
        let mut store = pt.params.clone();
        scramble(&mut store, &mut rng, 0.5);
        let lens = [16, 12];
        let frames: Tensor<f32> = random(&mut rng, &[2, 16, 4], 1.0).cast();
        worst = worst.max(check(
            &mut store,
            &|fx| pt.forward(fx, &frames, &lens, &pcfg, seed, true).unwrap().loss,
            seed,
        ));
    }
    worst
}
