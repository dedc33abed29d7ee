use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Utterance;
use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A padded single-language batch ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lang: usize,
    /// `[B, T, F]`, zero-padded past each utterance's length.
    pub frames: Tensor<f32>,
    pub frame_lens: Vec<usize>,
    /// Full target sequences `[tag, chars..., eos]`.
    pub tokens: Vec<Vec<usize>>,
}

/// Teacher-forcing view of a batch: decoder inputs are the targets shifted
/// right by one (they start at the language tag).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderIo {
    /// `[B, L]`, right-padded with `PAD`.
    pub inputs: Vec<usize>,
    /// `[B * L]`; `None` at padding.
    pub targets: Vec<Option<usize>>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Batch {
    pub fn new(utts: &[&Utterance]) -> Result<Self> {
        let first = utts.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        if utts.iter().any(|u| u.lang != first.lang) {
            return Err(Error::Data("batch mixes languages".into()));
        }
        if let Some(u) = utts.iter().find(|u| u.tokens.len() < 2) {
            return Err(Error::Data(format!("utterance {:?} has no target tokens", u.text)));
        }
        let f = first.frames.shape()[1];
        let t = utts.iter().map(|u| u.n_frames()).max().unwrap();
        let mut data = vec![0.0f32; utts.len() * t * f];
        for (b, u) in utts.iter().enumerate() {
            let src = u.frames.data();
            data[b * t * f..b * t * f + src.len()].copy_from_slice(src);
        }
        Ok(Self {
            lang: first.lang,
            frames: Tensor::new(vec![utts.len(), t, f], data)?,
            frame_lens: utts.iter().map(|u| u.n_frames()).collect(),
            tokens: utts.iter().map(|u| u.tokens.clone()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Scored target positions (non-padding).
    pub fn target_count(&self) -> usize {
        self.tokens.iter().map(|t| t.len() - 1).sum()
    }

    pub fn decoder_io(&self) -> DecoderIo {
        let width = self.tokens.iter().map(|t| t.len() - 1).max().unwrap_or(1);
        let b = self.size();
        let mut inputs = vec![PAD; b * width];
        let mut targets = vec![None; b * width];
        let mut lens = Vec::with_capacity(b);
        for (r, seq) in self.tokens.iter().enumerate() {
            let n = seq.len() - 1;
            inputs[r * width..r * width + n].copy_from_slice(&seq[..n]);
            for j in 0..n {
                targets[r * width + j] = Some(seq[j + 1]);
            }
            lens.push(n);
        }
        DecoderIo {
            inputs,
            targets,
            lens,
            width,
        }
    }

    /// Row-wise concatenation of two batches of the same language.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.lang != other.lang || self.frames.shape()[2] != other.frames.shape()[2] {
            return Err(Error::Data("cannot concatenate batches of different languages or feature sizes".into()));
        }
        let utts: Vec<Utterance> = self.unbatch().into_iter().chain(other.unbatch()).collect();
        Batch::new(&utts.iter().collect::<Vec<_>>())
    }

    /// Splits back into unpadded utterances.
    pub fn unbatch(&self) -> Vec<Utterance> {
        let s = self.frames.shape();
        let (t, f) = (s[1], s[2]);
        self.tokens
            .iter()
            .enumerate()
            .map(|(b, tokens)| {
                let n = self.frame_lens[b];
                let data = self.frames.data()[b * t * f..b * t * f + n * f].to_vec();
                Utterance {
                    lang: self.lang,
                    text: String::new(),
                    frames: Tensor::new(vec![n, f], data).expect("valid length"),
                    tokens: tokens.clone(),
                }
            })
            .collect()
    }
}

/// Indices of the utterances forming one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    /// Set when every member has the same language.
    pub lang: Option<usize>,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batching {
    pub batches: Vec<BatchPlan>,
    /// Utterances longer than the frame budget.
    pub skipped: usize,
}

/// Groups `utts` into batches whose padded size `B * max_T` stays within
/// `frame_budget`. Utterances are sorted by length (within each language
/// when `homogeneous`) and packed greedily; batch order is shuffled by
/// `seed`.
pub fn make_batches(utts: &[Utterance], frame_budget: usize, homogeneous: bool, seed: u64) -> Batching {
    let mut order: Vec<usize> = (0..utts.len()).filter(|&i| utts[i].n_frames() <= frame_budget).collect();
    let skipped = utts.len() - order.len();
    if skipped > 0 {
        log::warn!("{skipped} utterances exceed the frame budget of {frame_budget} and were skipped");
    }
    order.sort_by_key(|&i| (if homogeneous { utts[i].lang } else { 0 }, utts[i].n_frames(), i));
    let mut batches: Vec<BatchPlan> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let n = utts[i].n_frames();
        let lang_change = homogeneous && cur.first().is_some_and(|&j| utts[j].lang != utts[i].lang);
        if !cur.is_empty() && (lang_change || (cur.len() + 1) * longest.max(n) > frame_budget) {
            batches.push(plan(utts, std::mem::take(&mut cur)));
            longest = 0;
        }
        cur.push(i);
        longest = longest.max(n);
    }
    if !cur.is_empty() {
        batches.push(plan(utts, cur));
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Batching { batches, skipped }
}

fn plan(utts: &[Utterance], items: Vec<usize>) -> BatchPlan {
    let l = utts[items[0]].lang;
    let lang = items.iter().all(|&i| utts[i].lang == l).then_some(l);
    BatchPlan { lang, items }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(lang: usize, frames: usize, tokens: usize) -> Utterance {
        Utterance {
            lang,
            text: String::new(),
            frames: Tensor::full(&[frames, 2], lang as f32 + 1.0),
            tokens: (0..tokens).map(|i| 10 + i).collect(),
        }
    }

    fn corpus() -> Vec<Utterance> {
        (0..30).map(|i| utt(i % 3, 5 + (i * 7) % 11, 3 + i % 4)).collect()
    }

    #[test]
    fn budget_equal_to_longest_gives_singletons() {
        // every length exceeds half the longest, so no two share a batch
        let u: Vec<Utterance> = (0..30).map(|i| utt(i % 3, 8 + (i * 7) % 8, 3)).collect();
        let max = u.iter().map(|u| u.n_frames()).max().unwrap();
        let b = make_batches(&u, max, true, 0);
        assert!(b.batches.iter().all(|p| p.items.len() == 1));
        assert_eq!(b.batches.len(), u.len());
    }

    #[test]
    fn conservation_and_budget() {
        let mut u = corpus();
        u.push(utt(0, 100, 3));
        let b = make_batches(&u, 40, true, 7);
        assert_eq!(b.skipped, 1);
        let total: usize = b.batches.iter().map(|p| p.items.len()).sum();
        assert_eq!(total, u.len() - 1);
        for p in &b.batches {
            let longest = p.items.iter().map(|&i| u[i].n_frames()).max().unwrap();
            assert!(p.items.len() * longest <= 40);
            assert!(p.lang.is_some());
        }
    }

    #[test]
    fn decoder_io_shifts_by_one() {
        let a = utt(0, 4, 4);
        let b = utt(0, 6, 3);
        let batch = Batch::new(&[&a, &b]).unwrap();
        let io = batch.decoder_io();
        assert_eq!(io.width, 3);
        assert_eq!(io.inputs, vec![10, 11, 12, 10, 11, PAD]);
        assert_eq!(io.targets, vec![Some(11), Some(12), Some(13), Some(11), Some(12), None]);
        assert_eq!(batch.target_count(), 5);
        assert_eq!(batch.frames.shape(), &[2, 6, 2]);
        assert_eq!(batch.frames.data()[8..12], [0.0; 4]);
    }

    #[test]
    fn mixed_languages_rejected() {
        let (a, b) = (utt(0, 4, 3), utt(1, 4, 3));
        assert!(Batch::new(&[&a, &b]).is_err());
    }

    #[test]
    fn concat_round_trip() {
        let (a, b) = (utt(1, 4, 3), utt(1, 6, 5));
        let ab = Batch::new(&[&a, &b]).unwrap();
        let both = ab.concat(&ab).unwrap();
        assert_eq!(both.size(), 4);
        assert_eq!(both.unbatch()[3].frames, b.frames);
    }
}
