use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{Error, Result};
use crate::params::fnv1a;
use crate::tensor::Float;

/// Masked positions over the downsampled frames of each utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masks: Vec<Vec<bool>>,
    /// Utterances shorter than one span; their masks are all false.
    pub skipped: usize,
}

impl MaskPlan {
    pub fn masked(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }

    /// Number of maximal masked runs of utterance `b`.
    pub fn runs(&self, b: usize) -> usize {
        let m = &self.masks[b];
        (0..m.len()).filter(|&t| m[t] && (t == 0 || !m[t - 1])).count()
    }
}

const MAX_DRAWS: usize = 1000;

fn span_mask(len: usize, starts: &[usize], span_len: usize) -> Vec<bool> {
    let mut m = vec![false; len];
    for &s in starts {
        for t in s..(s + span_len).min(len) {
            m[t] = true;
        }
    }
    m
}

/// Samples masked spans: every position starts a span of `span_len` with
/// probability `p` (spans are clipped at the end and merge on overlap). At
/// least one span is always placed. Draws whose masked fraction falls
/// outside `[0.1, 0.9]` are redrawn; when a single span already exceeds 0.9
/// of the utterance, or no valid draw turns up, one span is used.
pub fn plan_masks(lengths: &[usize], p: f64, span_len: usize, seed: u64) -> Result<MaskPlan> {
    if !(p > 0.0 && p < 1.0) || span_len == 0 {
        return Err(Error::Usage(format!(
            "mask probability must be in (0, 1) and span length >= 1 (got {p}, {span_len})"
        )));
    }
    let mut skipped = 0;
    let mut masks = Vec::with_capacity(lengths.len());
    for (b, &len) in lengths.iter().enumerate() {
        if len < span_len {
            skipped += 1;
            masks.push(vec![false; len]);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(format!("mask:{seed}:{b}").as_bytes()));
        let last_start = len - span_len;
        let single = |rng: &mut ChaCha8Rng| span_mask(len, &[rng.gen_range(0..=last_start)], span_len);
        let mask = if span_len as f64 / len as f64 > 0.9 {
            single(&mut rng)
        } else {
            let mut found = None;
            for _ in 0..MAX_DRAWS {
                let mut starts: Vec<usize> = (0..len).filter(|_| rng.gen::<f64>() < p).collect();
                if starts.is_empty() {
                    starts.push(rng.gen_range(0..=last_start));
                }
                let m = span_mask(len, &starts, span_len);
                let frac = m.iter().filter(|&&x| x).count() as f64 / len as f64;
                if (0.1..=0.9).contains(&frac) {
                    found = Some(m);
                    break;
                }
            }
            found.unwrap_or_else(|| single(&mut rng))
        };
        masks.push(mask);
    }
    if skipped > 0 {
        log::debug!("{skipped} utterances shorter than the mask span were left unmasked");
    }
    Ok(MaskPlan { masks, skipped })
}

/// InfoNCE value with its bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct Contrastive {
    /// Mean over scored positions (a zero constant when none).
    pub loss: Var,
    pub positions: usize,
    /// Mean of `ln(K + 1)` over positions, the loss under uniform similarity.
    pub uniform: f64,
    /// Utterances with a single masked position (no negative available).
    pub dropped: usize,
}

/// Contrastive loss over masked positions. `context` and `targets` are
/// `[B, T, d]`; `masks[b]` flags positions of utterance `b` (length ≤ T).
/// Each position scores its own target against up to `n_negatives` targets
/// drawn uniformly from the other masked positions of the same utterance,
/// with cosine similarity divided by `temperature`.
pub fn contrastive_loss<T: Float>(
    g: &mut Graph<T>,
    context: Var,
    targets: Var,
    masks: &[Vec<bool>],
    n_negatives: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Contrastive> {
    let s = g.shape(context).to_vec();
    if s.len() != 3 || g.shape(targets) != s.as_slice() || masks.len() != s[0] || masks.iter().any(|m| m.len() > s[1]) {
        return Err(Error::Dimension(format!(
            "contrastive_loss: context {s:?}, targets {:?}, {} masks",
            g.shape(targets),
            masks.len()
        )));
    }
    if n_negatives == 0 || !(temperature > 0.0) {
        return Err(Error::Usage("contrastive loss needs n_negatives >= 1 and temperature > 0".into()));
    }
    let (t, d) = (s[1], s[2]);
    let c = g.reshape(context, &[s[0] * t, d])?;
    let q = g.reshape(targets, &[s[0] * t, d])?;
    let c = g.l2_normalize(c, 1e-8);
    let q = g.l2_normalize(q, 1e-8);
    // anchors and candidate rows grouped by negative count
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); n_negatives + 1];
    let mut dropped = 0;
    for (b, m) in masks.iter().enumerate() {
        let pos: Vec<usize> = (0..m.len()).filter(|&i| m[i]).map(|i| b * t + i).collect();
        if pos.is_empty() {
            continue;
        }
        let k = n_negatives.min(pos.len() - 1);
        if k == 0 {
            dropped += 1;
            continue;
        }
        for (i, &row) in pos.iter().enumerate() {
            let (anchors, cands) = &mut groups[k];
            anchors.push(row);
            cands.push(row);
            for j in sample(rng, pos.len() - 1, k) {
                cands.push(pos[if j >= i { j + 1 } else { j }]);
            }
        }
    }
    if dropped > 0 {
        log::debug!("{dropped} utterances have a single masked position and add no contrastive loss");
    }
    let positions: usize = groups.iter().map(|(a, _)| a.len()).sum();
    if positions == 0 {
        let zero = g.constant(&[1], vec![T::zero()]);
        return Ok(Contrastive {
            loss: zero,
            positions: 0,
            uniform: 0.0,
            dropped,
        });
    }
    let mut total: Option<Var> = None;
    let mut uniform = 0.0;
    for (k, (anchors, cands)) in groups.iter().enumerate() {
        if anchors.is_empty() {
            continue;
        }
        uniform += anchors.len() as f64 * ((k + 1) as f64).ln();
        let a = g.gather_rows(c, anchors, &[anchors.len(), d])?;
        let b = g.gather_rows(q, cands, &[cands.len(), d])?;
        let logits = g.row_dot(a, b, k + 1)?;
        let logits = g.scale(logits, 1.0 / temperature);
        let labels = vec![Some(0); anchors.len()];
        let l = g.cross_entropy(logits, &labels, 0.0, Reduction::Normalizer(positions as f64))?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(Contrastive {
        loss: total.expect("some group is non-empty"),
        positions,
        uniform: uniform / positions as f64,
        dropped,
    })
}

/// Index of the nearest row of `codebook: [C, d]` (squared Euclidean) for
/// every row of `x: [N, d]`; the lowest index wins ties.
pub fn nearest_codes<T: Float>(x: &[T], codebook: &[T], d: usize) -> Vec<usize> {
    x.chunks_exact(d)
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (i, e) in codebook.chunks_exact(d).enumerate() {
                let dist: f64 = row.iter().zip(e).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum();
                if dist < best.1 {
                    best = (i, dist);
                }
            }
            best.0
        })
        .collect()
}
