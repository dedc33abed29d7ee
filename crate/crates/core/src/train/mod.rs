//! Supervised fine-tuning: optimizer, schedule, accumulation and the fit loop.

pub mod optim;
pub mod schedule;

pub use optim::{clip_grads, grad_norm, Adam};
pub use schedule::Schedule;

use std::time::Instant;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Reduction;
use crate::config::RunConfig;
use crate::data::{make_batches, Batch, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::eval::{score, subset, DecodeOptions};
use crate::layers::Forward;
use crate::model::{Checkpoint, Model};
use crate::params::{fnv1a, ParamStore};
use crate::tensor::Float;

/// Outcome of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub update: usize,
    pub lr: f64,
    /// Loss per target token, summed over the update's micro-batches.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Optimizer state plus the knobs of the training objective.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub schedule: Schedule,
    pub opt: Adam<T>,
    pub smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Completed updates.
    pub updates: usize,
}

impl<T: Float> Trainer<T> {
    /// The optimizer tracks exactly the tensors trainable right now.
    pub fn new(model: &Model<T>, schedule: Schedule, seed: u64) -> Self {
        Self {
            schedule,
            opt: Adam::new(&model.params),
            smoothing: model.config.label_smoothing,
            dropout: model.config.dropout,
            seed,
            updates: 0,
        }
    }

    /// One update from `micro` batches: gradients are summed and the loss is
    /// normalized by the total number of target tokens, then clipped and
    /// applied. Gradients are cleared afterwards.
    pub fn update(&mut self, model: &mut Model<T>, micro: &[&Batch]) -> Result<StepStats> {
        if micro.is_empty() {
            return Err(Error::Usage("update needs at least one micro-batch".into()));
        }
        let step = self.updates + 1;
        let tokens: usize = micro.iter().map(|b| b.target_count()).sum();
        if tokens == 0 {
            return Err(Error::Data("update has no target tokens".into()));
        }
        model.params.zero_grads();
        let mut loss = 0.0;
        for (j, b) in micro.iter().enumerate() {
            let seed = fnv1a(format!("{}:{step}:{j}", self.seed).as_bytes());
            let grads = {
                let mut fx = Forward::training(&model.params, self.dropout, seed);
                let l = model.loss(&mut fx, b, self.smoothing, Reduction::Normalizer(tokens as f64))?;
                let v = fx.g.item(l).f64();
                if !v.is_finite() {
                    return Err(Error::Numerical {
                        step,
                        what: format!("loss is {v}"),
                    });
                }
                loss += v;
                fx.g.backward(l)?
            };
            model.params.accumulate(&grads);
        }
        let (lr, norm) = optimizer_step(&mut model.params, &mut self.opt, &self.schedule, step)?;
        self.updates = step;
        Ok(StepStats {
            update: step,
            lr,
            loss,
            grad_norm: norm,
            tokens,
        })
    }
}

/// Clips the accumulated gradients, applies Adam at the scheduled rate for
/// `step` and clears the gradients. Returns `(lr, pre-clip norm)`.
pub fn optimizer_step<T: Float>(
    params: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    schedule: &Schedule,
    step: usize,
) -> Result<(f64, f64)> {
    let norm = clip_grads(params, schedule.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Numerical {
            step,
            what: format!("gradient norm is {norm}"),
        });
    }
    let lr = schedule.lr_at_step(step)?;
    opt.update(params, lr);
    params.zero_grads();
    Ok((lr, norm))
}

/// A single-batch update.
pub fn train_step<T: Float>(model: &mut Model<T>, batch: &Batch, trainer: &mut Trainer<T>) -> Result<StepStats> {
    trainer.update(model, &[batch])
}

/// Groups a micro-batch stream into updates of `factor` micro-batches
/// each; a trailing incomplete group is dropped.
pub fn accumulate<T: Float>(
    model: &mut Model<T>,
    trainer: &mut Trainer<T>,
    micro: &[Batch],
    factor: usize,
) -> Result<Vec<StepStats>> {
    if factor == 0 {
        return Err(Error::Usage("accumulation factor must be >= 1".into()));
    }
    micro
        .chunks_exact(factor)
        .map(|group| {
            let refs: Vec<&Batch> = group.iter().collect();
            trainer.update(model, &refs)
        })
        .collect()
}

/// Token-normalized cross-entropy (no smoothing, no dropout) over `utts`.
pub fn dev_loss<T: Float>(model: &Model<T>, utts: &[Utterance], frame_budget: usize) -> Result<f64> {
    let plan = make_batches(utts, frame_budget, true, 0);
    let (mut sum, mut tokens) = (0.0, 0usize);
    for p in &plan.batches {
        let members: Vec<&Utterance> = p.items.iter().map(|&i| &utts[i]).collect();
        let b = Batch::new(&members)?;
        let mut fx = Forward::new(&model.params);
        let l = model.loss(&mut fx, &b, 0.0, Reduction::Normalizer(1.0))?;
        sum += fx.g.item(l).f64();
        tokens += b.target_count();
    }
    if tokens == 0 {
        return Err(Error::UndefinedMetric("dev loss over no tokens".into()));
    }
    Ok(sum / tokens as f64)
}

/// One periodic evaluation of a fit run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub update: usize,
    pub lr: f64,
    /// Mean per-token training loss since the previous record.
    pub train_loss: f64,
    pub dev_wer: f64,
    pub dev_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters at the lowest dev WER (earliest on ties).
    pub best: Checkpoint,
    pub best_update: usize,
    pub best_dev_wer: f64,
    /// Update with the lowest dev loss.
    pub best_loss_update: usize,
    pub log: Vec<EvalRecord>,
    pub skipped: usize,
}

/// Draws training batches: a language with probability proportional to
/// `train_size^alpha`, then that language's next batch (reshuffled every
/// pass).
struct Sampler {
    queues: Vec<Vec<Vec<usize>>>,
    cursor: Vec<usize>,
    pick: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(utts: &[Utterance], frame_budget: usize, alpha: f64, seed: u64) -> Result<(Self, usize)> {
        let plan = make_batches(utts, frame_budget, true, seed);
        let langs = utts.iter().map(|u| u.lang + 1).max().unwrap_or(0);
        let mut queues = vec![Vec::new(); langs];
        for p in plan.batches {
            queues[p.lang.expect("homogeneous batches")].push(p.items);
        }
        let mut sizes = vec![0usize; langs];
        for u in utts {
            sizes[u.lang] += 1;
        }
        let weights: Vec<f64> = (0..langs)
            .map(|l| if queues[l].is_empty() { 0.0 } else { (sizes[l] as f64).powf(alpha) })
            .collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Data(format!("no trainable batches: {e}")))?;
        Ok((
            Self {
                cursor: vec![0; langs],
                queues,
                pick,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            plan.skipped,
        ))
    }

    fn next(&mut self) -> &[usize] {
        let l = self.pick.sample(&mut self.rng);
        if self.cursor[l] == self.queues[l].len() {
            self.queues[l].shuffle(&mut self.rng);
            self.cursor[l] = 0;
        }
        self.cursor[l] += 1;
        &self.queues[l][self.cursor[l] - 1]
    }
}

/// Trains `model` for `train.total_updates` updates, evaluating greedy dev
/// WER and dev loss every `train.eval_interval` updates and after the last.
/// `on_record` sees every record as it is produced.
pub fn fit(
    model: &mut Model<f32>,
    corpus: &Corpus,
    cfg: &RunConfig,
    seed: u64,
    mut on_record: impl FnMut(&EvalRecord),
) -> Result<FitResult> {
    let tc = &cfg.train;
    let schedule = Schedule::from_config(tc)?;
    if tc.total_updates == 0 || tc.eval_interval == 0 {
        return Err(Error::Config("train.total_updates and train.eval_interval must be >= 1".into()));
    }
    if corpus.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let dev: Vec<Utterance> = subset(&corpus.dev, tc.dev_per_lang).into_iter().cloned().collect();
    let dev_refs: Vec<&Utterance> = dev.iter().collect();
    let opts = DecodeOptions::greedy(cfg.eval.max_len);
    let (mut sampler, skipped) = Sampler::new(&corpus.train, tc.frame_budget, tc.lang_alpha, seed)?;
    let mut trainer = Trainer::new(model, schedule, seed);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut best_loss = (f64::INFINITY, 0);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    while trainer.updates < tc.total_updates {
        let batches: Vec<Batch> = (0..tc.accumulation)
            .map(|_| {
                let items = sampler.next();
                let members: Vec<&Utterance> = items.iter().map(|&i| &corpus.train[i]).collect();
                Batch::new(&members)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Batch> = batches.iter().collect();
        let stats = trainer.update(model, &refs)?;
        loss_sum += stats.loss;
        loss_n += 1;
        let u = stats.update;
        if u % tc.eval_interval != 0 && u != tc.total_updates {
            continue;
        }
        let (report, _) = score(model, &corpus.langs, &corpus.vocab, &dev_refs, &opts, "dev")?;
        let rec = EvalRecord {
            update: u,
            lr: stats.lr,
            train_loss: loss_sum / loss_n as f64,
            dev_wer: report.overall(),
            dev_loss: dev_loss(model, &dev, tc.frame_budget)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        (loss_sum, loss_n) = (0.0, 0);
        if rec.dev_loss < best_loss.0 {
            best_loss = (rec.dev_loss, u);
        }
        if best.as_ref().is_none_or(|(w, _, _)| rec.dev_wer < *w) {
            let mut ck = model.to_checkpoint();
            ck.set_meta("update", u.to_string());
            ck.set_meta("dev_wer", rec.dev_wer.to_string());
            best = Some((rec.dev_wer, u, ck));
        }
        on_record(&rec);
        log.push(rec);
    }
    let (best_dev_wer, best_update, best) = best.expect("at least one evaluation");
    Ok(FitResult {
        best,
        best_update,
        best_dev_wer,
        best_loss_update: best_loss.1,
        log,
        skipped,
    })
}
