//! Decoding, error rates and tiered reporting.

pub mod decode;
pub mod metrics;
pub mod report;

pub use decode::{decode, DecodeMode, DecodeOptions, Hypothesis};
pub use metrics::{corpus_errors, edit_distance, error_rate, units, wer, EditCounts, Unit};
pub use report::{tier_report, EvalReport, LangResult, TierAverage, TierSummary};

use crate::data::{Corpus, LangSpec, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Float;

/// Decodes `utts` and scores them per language. Languages without
/// utterances are absent from the report.
pub fn score<T: Float>(
    model: &Model<T>,
    langs: &[LangSpec],
    vocab: &Vocab,
    utts: &[&Utterance],
    opts: &DecodeOptions,
    split: &str,
) -> Result<(EvalReport, Vec<Hypothesis>)> {
    let hyps = decode(model, utts, opts)?;
    let mut results = Vec::new();
    for spec in langs {
        let idx: Vec<usize> = (0..utts.len()).filter(|&i| utts[i].lang == spec.id).collect();
        if idx.is_empty() {
            continue;
        }
        let refs: Vec<&str> = idx.iter().map(|&i| utts[i].text.as_str()).collect();
        let texts: Vec<String> = idx.iter().map(|&i| vocab.detokenize(&hyps[i].tokens)).collect();
        let hyp_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let unit = if spec.char_scored { Unit::Char } else { Unit::Word };
        let (errors, ref_len) = corpus_errors(&refs, &hyp_refs, unit)?;
        if ref_len == 0 {
            return Err(Error::UndefinedMetric(format!("language {} has empty references", spec.tag)));
        }
        results.push(LangResult {
            tag: spec.tag.clone(),
            tier: spec.tier,
            unit,
            wer: 100.0 * errors.dist as f64 / ref_len as f64,
            errors,
            ref_len,
            utterances: idx.len(),
            truncated: idx.iter().filter(|&&i| hyps[i].truncated).count(),
        });
    }
    let report = EvalReport::new(model.variant.label(), model.seed, split, results)?;
    Ok((report, hyps))
}

/// The first `max_per_lang` utterances of every language (all when 0), in
/// split order.
pub fn subset(utts: &[Utterance], max_per_lang: usize) -> Vec<&Utterance> {
    let mut seen = std::collections::HashMap::new();
    utts.iter()
        .filter(|u| {
            let n = seen.entry(u.lang).or_insert(0usize);
            *n += 1;
            max_per_lang == 0 || *n <= max_per_lang
        })
        .collect()
}

/// Scores a corpus split.
pub fn evaluate<T: Float>(
    model: &Model<T>,
    corpus: &Corpus,
    split: &str,
    opts: &DecodeOptions,
    max_per_lang: usize,
) -> Result<(EvalReport, Vec<Hypothesis>)> {
    let utts = subset(corpus.split(split)?, max_per_lang);
    score(model, &corpus.langs, &corpus.vocab, &utts, opts, split)
}
