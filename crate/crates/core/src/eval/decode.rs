use std::str::FromStr;

use crate::config::EvalConfig;
use crate::data::{Utterance, EOS};
use crate::error::{Error, Result};
use crate::layers::{Forward, LangId};
use crate::model::Model;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            _ => Err(Error::Config(format!("unknown decode mode {s:?} (expected greedy or beam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Maximum generated tokens after the language tag (end token included).
    pub max_len: usize,
    pub length_penalty: f64,
}

impl DecodeOptions {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 1,
            max_len,
            length_penalty: 1.0,
        }
    }

    pub fn from_config(cfg: &EvalConfig) -> Result<Self> {
        let o = Self {
            mode: cfg.mode.parse()?,
            beam_width: cfg.beam_width,
            max_len: cfg.max_len,
            length_penalty: cfg.length_penalty,
        };
        if o.max_len == 0 || o.beam_width == 0 {
            return Err(Error::Config("eval.max_len and eval.beam_width must be >= 1".into()));
        }
        Ok(o)
    }
}

/// A decoded sequence without its language tag and end token.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// No end token within `max_len`.
    pub truncated: bool,
    /// Sum of token log-probabilities (end token included when present).
    pub log_prob: f64,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Memory<T> {
    values: Tensor<T>,
    lens: Vec<usize>,
}

impl<T: Float> Memory<T> {
    fn encode(model: &Model<T>, utts: &[&Utterance], lang: LangId) -> Result<Self> {
        let batch = crate::data::Batch::new(utts)?;
        let mut fx = Forward::new(&model.params);
        let (m, lens) = model.encode(&mut fx, &batch.frames, &batch.frame_lens, lang)?;
        Ok(Self {
            values: fx.g.tensor(m),
            lens,
        })
    }

    /// Row `b` repeated `n` times.
    fn repeat(&self, b: usize, n: usize) -> Self {
        let s = self.values.shape();
        let row = s[1] * s[2];
        let src = &self.values.data()[b * row..(b + 1) * row];
        let data = (0..n).flat_map(|_| src.iter().copied()).collect();
        Self {
            values: Tensor::new(vec![n, s[1], s[2]], data).expect("non-empty"),
            lens: vec![self.lens[b]; n],
        }
    }

    /// Log-probabilities of the next token after each prefix (all prefixes
    /// have equal length; row `i` attends to memory row `i`).
    fn next(&self, model: &Model<T>, prefixes: &[Vec<usize>], lang: LangId) -> Result<Vec<Vec<f64>>> {
        let t = prefixes[0].len();
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut fx = Forward::new(&model.params);
        let mem = fx.g.leaf(&self.values, false);
        let lens = vec![t; prefixes.len()];
        let logits = model.arch.decoder.forward(&mut fx, mem, &self.lens, &ids, &lens, t, lang)?;
        let v = model.config.vocab_size;
        let vals = fx.g.value(logits);
        Ok((0..prefixes.len())
            .map(|b| {
                let off = (b * t + t - 1) * v;
                log_softmax(&vals[off..off + v].iter().map(|x| x.f64()).collect::<Vec<_>>())
            })
            .collect())
    }
}

fn greedy<T: Float>(model: &Model<T>, mem: &Memory<T>, tag: usize, lang: LangId, max_len: usize) -> Result<Vec<Hypothesis>> {
    let b = mem.lens.len();
    let mut prefixes = vec![vec![tag]; b];
    let mut done = vec![false; b];
    let mut hyps: Vec<Hypothesis> = (0..b)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            truncated: true,
            log_prob: 0.0,
        })
        .collect();
    for _ in 0..max_len {
        let lp = mem.next(model, &prefixes, lang)?;
        for i in 0..b {
            let tok = argmax(&lp[i]);
            prefixes[i].push(tok);
            if done[i] {
                continue;
            }
            hyps[i].log_prob += lp[i][tok];
            if tok == EOS {
                done[i] = true;
                hyps[i].truncated = false;
            } else {
                hyps[i].tokens.push(tok);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(hyps)
}

fn beam<T: Float>(model: &Model<T>, mem: &Memory<T>, tag: usize, lang: LangId, opts: &DecodeOptions) -> Result<Hypothesis> {
    let width = opts.beam_width;
    let norm = |h: &Hypothesis| h.log_prob / ((h.tokens.len() + 1) as f64).powf(opts.length_penalty);
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![tag], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let rep = mem.repeat(0, alive.len());
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let lp = rep.next(model, &prefixes, lang)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * lp[0].len());
        for (i, row) in lp.iter().enumerate() {
            for (v, &l) in row.iter().enumerate() {
                cands.push((alive[i].1 + l, i, v));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for &(score, i, v) in cands.iter().take(width) {
            if v == EOS {
                finished.push(Hypothesis {
                    tokens: alive[i].0[1..].to_vec(),
                    truncated: false,
                    log_prob: score,
                });
            } else {
                let mut p = alive[i].0.clone();
                p.push(v);
                next.push((p, score));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    if finished.is_empty() {
        let (p, score) = alive.into_iter().next().expect("beam never empties without finishing");
        return Ok(Hypothesis {
            tokens: p[1..].to_vec(),
            truncated: true,
            log_prob: score,
        });
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if norm(h) > norm(&finished[best]) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Decodes every utterance, starting from its language tag. Utterances of
/// one language are encoded together; results come back in input order.
pub fn decode<T: Float>(model: &Model<T>, utts: &[&Utterance], opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    let mut out: Vec<Option<Hypothesis>> = vec![None; utts.len()];
    let mut langs: Vec<LangId> = utts.iter().map(|u| u.lang).collect();
    langs.sort_unstable();
    langs.dedup();
    const CHUNK: usize = 32;
    for lang in langs {
        let idx: Vec<usize> = (0..utts.len()).filter(|&i| utts[i].lang == lang).collect();
        let tag = *utts[idx[0]]
            .tokens
            .first()
            .ok_or_else(|| Error::Data("utterance without a language tag".into()))?;
        for chunk in idx.chunks(CHUNK) {
            let group: Vec<&Utterance> = chunk.iter().map(|&i| utts[i]).collect();
            let mem = Memory::encode(model, &group, lang)?;
            let hyps = match opts.mode {
                DecodeMode::Greedy => greedy(model, &mem, tag, lang, opts.max_len)?,
                DecodeMode::Beam => (0..group.len())
                    .map(|b| beam(model, &mem.repeat(b, 1), tag, lang, opts))
                    .collect::<Result<_>>()?,
            };
            for (&i, h) in chunk.iter().zip(hyps) {
                out[i] = Some(h);
            }
        }
    }
    Ok(out.into_iter().map(|h| h.expect("every utterance decoded")).collect())
}
