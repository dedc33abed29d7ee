//! Self-supervised pretraining of the encoder (masked contrastive) and of the
//! decoder (denoising sequence-to-sequence).

pub mod contrastive;
pub mod denoise;

pub use contrastive::{contrastive_loss, nearest_codes, plan_masks, Contrastive, MaskPlan};
pub use denoise::{corrupt_text, NoiseConfig};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamId, Reduction, Var};
use crate::config::{ModelConfig, PretrainConfig, RunConfig};
use crate::data::{Corpus, Utterance, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{Forward, Linear};
use crate::model::checkpoint::Checkpoint;
use crate::model::transformer::{embed_tokens, AcousticEncoder, Decoder, TextEncoder};
use crate::model::{DECODER_KIND, ENCODER_KIND};
use crate::params::{fnv1a, normal, ParamStore, Role};
use crate::tensor::{Float, Tensor};
use crate::train::{optimizer_step, Adam, Schedule};

/// Per-step pretraining record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f64,
    /// Full objective.
    pub loss: f64,
    /// Contrastive part (encoder) or reconstruction cross-entropy (decoder).
    pub main: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub log: Vec<PretrainRecord>,
}

fn step_seed(seed: u64, what: &str, step: usize) -> u64 {
    fnv1a(format!("{what}:{seed}:{step}").as_bytes())
}

fn schedule(p: &PretrainConfig, steps: usize) -> Result<Schedule> {
    Schedule::new(p.peak_lr, p.warmup_steps, steps)
}

/// Zero-padded `[B, T, F]` frames and their lengths.
pub fn pad_frames(utts: &[&Utterance]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = utts.first().ok_or_else(|| Error::Data("empty frame batch".into()))?;
    let f = first.frames.shape()[1];
    let lens: Vec<usize> = utts.iter().map(|u| u.n_frames()).collect();
    let t = *lens.iter().max().unwrap();
    let mut data = vec![0f32; utts.len() * t * f];
    for (b, u) in utts.iter().enumerate() {
        let src = u.frames.data();
        data[b * t * f..b * t * f + src.len()].copy_from_slice(src);
    }
    Ok((Tensor::new(vec![utts.len(), t, f], data)?, lens))
}

/// Fills a padded budget with random pool utterances.
fn draw_frames(corpus: &Corpus, budget: usize, rng: &mut ChaCha8Rng) -> Vec<Utterance> {
    let pool = corpus.unlabeled_size();
    let mut out: Vec<Utterance> = Vec::new();
    let mut longest = 0;
    loop {
        let u = corpus.unlabeled(rng.gen_range(0..pool));
        let n = u.n_frames();
        if n > budget {
            continue;
        }
        if (out.len() + 1) * longest.max(n) > budget {
            break;
        }
        longest = longest.max(n);
        out.push(u);
    }
    out
}

/// Acoustic encoder with the extra pieces of contrastive pretraining: a
/// learned mask embedding, a codebook and a context projection.
#[derive(Clone, Debug)]
pub struct EncoderPretrainer<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: AcousticEncoder,
    pub mask_emb: ParamId,
    pub codebook: ParamId,
    pub proj: Linear,
}

/// One contrastive forward pass.
pub struct EncoderPass {
    pub loss: Var,
    pub contrastive: Contrastive,
    pub commit: Var,
    /// Encoder features before masking, `[B, T', d]`.
    pub features: Var,
}

impl<T: Float> EncoderPretrainer<T> {
    pub fn new(config: &ModelConfig, pcfg: &PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if pcfg.codebook_size < 2 {
            return Err(Error::Config("pretrain.codebook_size must be >= 2".into()));
        }
        let d = config.d_model;
        let mut params = ParamStore::new();
        let encoder = AcousticEncoder::new(&mut params, config, seed)?;
        let mask_emb = params.add("pt.mask_emb", normal(seed, "pt.mask_emb", &[d], 0.5), Role::PretrainOnly);
        let codebook = params.add(
            "pt.codebook",
            normal(seed, "pt.codebook", &[pcfg.codebook_size, d], 0.5),
            Role::PretrainOnly,
        );
        let proj = Linear::new(&mut params, "pt.proj", d, d, seed, Role::PretrainOnly);
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            mask_emb,
            codebook,
            proj,
        })
    }

    /// Masks the features, contextualizes them and scores every masked
    /// position against quantized targets. With `detach_codebook` the
    /// targets are the plain features (no quantizer, no commitment term).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        fx: &mut Forward<T>,
        frames: &Tensor<f32>,
        lens: &[usize],
        pcfg: &PretrainConfig,
        seed: u64,
        detach_codebook: bool,
    ) -> Result<EncoderPass> {
        let (z, lens) = self.encoder.features(fx, frames, lens)?;
        let s = fx.g.shape(z).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let plan = plan_masks(&lens, pcfg.mask_prob, pcfg.span_len, seed)?;
        let flat: Vec<bool> = plan
            .masks
            .iter()
            .flat_map(|m| (0..t).map(move |i| i < m.len() && m[i]))
            .collect();
        let me = fx.p(self.mask_emb);
        let masked = fx.g.mask_rows(z, &flat, me)?;
        let c = self.encoder.contextualize(fx, masked, &lens, 0)?;
        let c = self.proj.forward(fx, c)?;
        let (targets, commit) = if detach_codebook {
            let zero = fx.g.constant(&[1], vec![T::zero()]);
            (z, zero)
        } else {
            let zf = fx.g.reshape(z, &[b * t, d])?;
            let codes = nearest_codes(fx.g.value(zf), fx.params().get(self.codebook).data(), d);
            let cb = fx.p(self.codebook);
            let e = fx.g.gather_rows(cb, &codes, &[b * t, d])?;
            let q = fx.g.straight_through(zf, e)?;
            let q = fx.g.reshape(q, &[b, t, d])?;
            let diff = fx.g.sub(zf, e)?;
            let sq = fx.g.mul(diff, diff)?;
            let rows: Vec<usize> = (0..b * t).filter(|&r| flat[r]).collect();
            let commit = if rows.is_empty() {
                fx.g.constant(&[1], vec![T::zero()])
            } else {
                let picked = fx.g.gather_rows(sq, &rows, &[rows.len(), d])?;
                let m = fx.g.mean(picked);
                fx.g.scale(m, d as f64)
            };
            (q, commit)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let contrastive = contrastive_loss(&mut fx.g, c, targets, &plan.masks, pcfg.n_negatives, pcfg.temperature, &mut rng)?;
        let weighted = fx.g.scale(commit, pcfg.commit_weight);
        let loss = fx.g.add(contrastive.loss, weighted)?;
        Ok(EncoderPass {
            loss,
            contrastive,
            commit,
            features: z,
        })
    }

    /// Sets the codebook to randomly chosen feature rows of `features`.
    fn init_codebook(&mut self, features: &[T], d: usize, rng: &mut ChaCha8Rng) {
        let rows = features.len() / d;
        let cb = self.params.get_mut(self.codebook);
        let c = cb.shape()[0];
        let picks: Vec<usize> = (0..rows).collect::<Vec<_>>().choose_multiple(rng, c.min(rows)).copied().collect();
        for (i, &r) in picks.iter().enumerate() {
            cb.data_mut()[i * d..(i + 1) * d].copy_from_slice(&features[r * d..(r + 1) * d]);
        }
    }

    /// Encoder tensors (`enc.*`) plus the pretraining extras (`pt.*`).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", ENCODER_KIND);
        for (k, v) in self.config.echo() {
            c.set_meta(&k, v);
        }
        for (info, t) in self.params.iter() {
            let mut t: Tensor<f32> = t.cast();
            t.set_requires_grad(false);
            c.tensors.push((info.name.clone(), t));
        }
        c
    }
}

/// Contrastive pretraining of the convolutional front end and acoustic
/// encoder on the unlabeled pool.
pub fn pretrain_encoder(corpus: &Corpus, cfg: &RunConfig, seed: u64, mut on_step: impl FnMut(&PretrainRecord)) -> Result<Pretrained> {
    let p = &cfg.pretrain;
    if corpus.unlabeled_size() == 0 {
        return Err(Error::Data("unlabeled pool is empty".into()));
    }
    if cfg.model.enc_layers == 0 {
        return Err(Error::Config("encoder pretraining needs model.enc_layers >= 1".into()));
    }
    let sched = schedule(p, p.enc_steps)?;
    let mut m = EncoderPretrainer::<f32>::new(&cfg.model, p, seed)?;
    let mut opt = Adam::new(&m.params);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, "enc-data", 0));
    let mut log = Vec::with_capacity(p.enc_steps);
    for step in 1..=p.enc_steps {
        let utts = draw_frames(corpus, p.frame_budget, &mut rng);
        let refs: Vec<&Utterance> = utts.iter().collect();
        let (frames, lens) = pad_frames(&refs)?;
        if step == 1 {
            let mut fx = Forward::new(&m.params);
            let (z, _) = m.encoder.features(&mut fx, &frames, &lens)?;
            let d = m.config.d_model;
            let feats = fx.g.value(z).to_vec();
            m.init_codebook(&feats, d, &mut rng);
        }
        let s = step_seed(seed, "enc-step", step);
        let (grads, loss, main) = {
            let mut fx = Forward::training(&m.params, m.config.dropout, s);
            let pass = m.forward(&mut fx, &frames, &lens, p, s, false)?;
            let loss = fx.g.item(pass.loss).f64();
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    what: format!("contrastive loss is {loss}"),
                });
            }
            (fx.g.backward(pass.loss)?, loss, fx.g.item(pass.contrastive.loss).f64())
        };
        m.params.accumulate(&grads);
        let (lr, _) = optimizer_step(&mut m.params, &mut opt, &sched, step)?;
        let rec = PretrainRecord { step, lr, loss, main };
        on_step(&rec);
        log.push(rec);
    }
    let mut checkpoint = m.to_checkpoint();
    checkpoint.set_meta("seed", seed.to_string());
    checkpoint.set_meta("steps", p.enc_steps.to_string());
    Ok(Pretrained { checkpoint, log })
}

/// Text encoder-decoder trained to reconstruct corrupted sentences. The
/// encoder reads the shared decoder embedding.
#[derive(Clone, Debug)]
pub struct DecoderPretrainer<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub text: TextEncoder,
    pub decoder: Decoder,
}

/// Source and target ids of one denoising example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiseExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn pad_ids(seqs: &[&[usize]]) -> (Vec<usize>, Vec<usize>, usize) {
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let l = lens.iter().copied().max().unwrap_or(0);
    let mut ids = vec![PAD; seqs.len() * l];
    for (b, s) in seqs.iter().enumerate() {
        ids[b * l..b * l + s.len()].copy_from_slice(s);
    }
    (ids, lens, l)
}

impl<T: Float> DecoderPretrainer<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, config, true, seed)?;
        let decoder = Decoder::new(&mut params, config, seed)?;
        Ok(Self {
            config: config.clone(),
            params,
            text,
            decoder,
        })
    }

    /// Encoder memory for `sources`.
    fn encode(&self, fx: &mut Forward<T>, sources: &[&[usize]]) -> Result<(Var, Vec<usize>)> {
        let (ids, lens, l) = pad_ids(sources);
        let x = embed_tokens(fx, self.decoder.embed, &ids, sources.len(), l)?;
        Ok((self.text.forward(fx, x, &lens, 0)?, lens))
    }

    /// Teacher-forced reconstruction cross-entropy.
    pub fn loss(&self, fx: &mut Forward<T>, batch: &[DenoiseExample], smoothing: f64, reduction: Reduction) -> Result<Var> {
        let sources: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let (memory, mem_lens) = self.encode(fx, &sources)?;
        let inputs: Vec<&[usize]> = batch.iter().map(|e| &e.target[..e.target.len() - 1]).collect();
        let (ids, lens, l) = pad_ids(&inputs);
        let mut targets = vec![None; batch.len() * l];
        for (b, e) in batch.iter().enumerate() {
            for (i, &tok) in e.target[1..].iter().enumerate() {
                targets[b * l + i] = Some(tok);
            }
        }
        let logits = self.decoder.forward(fx, memory, &mem_lens, &ids, &lens, l, 0)?;
        let flat = fx.g.reshape(logits, &[batch.len() * l, self.config.vocab_size])?;
        fx.g.cross_entropy(flat, &targets, smoothing, reduction)
    }

    /// Greedy reconstruction of `source`, starting from `start` (the
    /// language tag). Returns generated tokens without the end token.
    pub fn greedy(&self, source: &[usize], start: usize, max_len: usize) -> Result<Vec<usize>> {
        let mut fx = Forward::new(&self.params);
        let (memory, mem_lens) = self.encode(&mut fx, &[source])?;
        let mem = fx.g.tensor(memory);
        let mut out = vec![start];
        let v = self.config.vocab_size;
        for _ in 0..max_len {
            let mut fx = Forward::new(&self.params);
            let m = fx.g.leaf(&mem, false);
            let l = out.len();
            let logits = self.decoder.forward(&mut fx, m, &mem_lens, &out, &[l], l, 0)?;
            let row = &fx.g.value(logits)[(l - 1) * v..l * v];
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
        }
        Ok(out[1..].to_vec())
    }

    /// Text encoder (`text_enc.*`) and decoder (`dec.*`) tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", DECODER_KIND);
        for (k, v) in self.config.echo() {
            c.set_meta(&k, v);
        }
        for (info, t) in self.params.iter() {
            let mut t: Tensor<f32> = t.cast();
            t.set_requires_grad(false);
            c.tensors.push((info.name.clone(), t));
        }
        c
    }
}

impl NoiseConfig {
    pub fn from_config(p: &PretrainConfig) -> Self {
        Self {
            deletion_prob: p.deletion_prob,
            infill_prob: p.infill_prob,
            infill_mean_span: p.infill_mean_span,
        }
    }
}

/// Denoising example for text-pool sentence `i`: the characters are
/// corrupted, the language tag and end token are kept.
pub fn denoise_example(corpus: &Corpus, i: usize, noise: &NoiseConfig, seed: u64) -> Result<DenoiseExample> {
    let (lang, text) = corpus.text(i);
    let target = corpus.vocab.target(lang, &text)?;
    let chars = &target[1..target.len() - 1];
    let mut source = vec![target[0]];
    source.extend(corrupt_text(chars, noise, fnv1a(format!("{seed}:{i}").as_bytes())));
    source.push(EOS);
    Ok(DenoiseExample { source, target })
}

/// Denoising pretraining on the text pool.
pub fn pretrain_decoder(corpus: &Corpus, cfg: &RunConfig, seed: u64, mut on_step: impl FnMut(&PretrainRecord)) -> Result<Pretrained> {
    let p = &cfg.pretrain;
    if corpus.text_pool_size() == 0 {
        return Err(Error::Data("text pool is empty".into()));
    }
    if p.text_batch == 0 {
        return Err(Error::Config("pretrain.text_batch must be >= 1".into()));
    }
    let sched = schedule(p, p.dec_steps)?;
    let noise = NoiseConfig::from_config(p);
    let mut m = DecoderPretrainer::<f32>::new(&cfg.model, seed)?;
    let mut opt = Adam::new(&m.params);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, "dec-data", 0));
    let pool = corpus.text_pool_size();
    let mut log = Vec::with_capacity(p.dec_steps);
    for step in 1..=p.dec_steps {
        let batch: Vec<DenoiseExample> = (0..p.text_batch)
            .map(|_| denoise_example(corpus, rng.gen_range(0..pool), &noise, step_seed(seed, "noise", step)))
            .collect::<Result<_>>()?;
        let s = step_seed(seed, "dec-step", step);
        let (grads, loss) = {
            let mut fx = Forward::training(&m.params, m.config.dropout, s);
            let l = m.loss(&mut fx, &batch, m.config.label_smoothing, Reduction::Mean)?;
            let loss = fx.g.item(l).f64();
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    what: format!("reconstruction loss is {loss}"),
                });
            }
            (fx.g.backward(l)?, loss)
        };
        m.params.accumulate(&grads);
        let (lr, _) = optimizer_step(&mut m.params, &mut opt, &sched, step)?;
        let rec = PretrainRecord { step, lr, loss, main: loss };
        on_step(&rec);
        log.push(rec);
    }
    let mut checkpoint = m.to_checkpoint();
    checkpoint.set_meta("seed", seed.to_string());
    checkpoint.set_meta("steps", p.dec_steps.to_string());
    Ok(Pretrained { checkpoint, log })
}
