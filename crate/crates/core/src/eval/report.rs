use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::metrics::{EditCounts, Unit};
use crate::data::Tier;
use crate::error::{Error, Result};

/// Scores of one language on one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LangResult {
    pub tag: String,
    pub tier: Tier,
    pub unit: Unit,
    /// Error rate in percent, full precision.
    pub wer: f64,
    pub errors: EditCounts,
    pub ref_len: usize,
    pub utterances: usize,
    /// Hypotheses cut at the decoding length limit.
    pub truncated: usize,
}

/// Unweighted mean over the languages of one tier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TierAverage {
    pub tier: Tier,
    pub wer: f64,
    pub langs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TierSummary {
    /// Non-empty tiers in medium, low, very-low order.
    pub tiers: Vec<TierAverage>,
    /// Unweighted mean over every language.
    pub overall: f64,
}

/// Macro averages per tier and overall. Every language in `per_lang` must
/// have a tier; tiers without languages are left out.
pub fn tier_report(per_lang: &[(String, f64)], tiers: &HashMap<String, Tier>) -> Result<TierSummary> {
    if per_lang.is_empty() {
        return Err(Error::UndefinedMetric("tier report over no languages".into()));
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); Tier::ALL.len()];
    for (tag, wer) in per_lang {
        let tier = tiers
            .get(tag)
            .ok_or_else(|| Error::Data(format!("language {tag} has no tier")))?;
        let slot = Tier::ALL.iter().position(|t| t == tier).expect("tier listed");
        groups[slot].push(*wer);
    }
    let mut out = Vec::new();
    for (tier, g) in Tier::ALL.iter().zip(&groups) {
        if g.is_empty() {
            log::warn!("tier {tier} has no languages; omitted from the report");
            continue;
        }
        out.push(TierAverage {
            tier: *tier,
            wer: g.iter().sum::<f64>() / g.len() as f64,
            langs: g.len(),
        });
    }
    let overall = per_lang.iter().map(|(_, w)| w).sum::<f64>() / per_lang.len() as f64;
    Ok(TierSummary { tiers: out, overall })
}

/// Per-language scores with tier and overall macro averages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub langs: Vec<LangResult>,
    pub summary: TierSummary,
}

impl EvalReport {
    pub fn new(variant: &str, seed: u64, split: &str, langs: Vec<LangResult>) -> Result<Self> {
        let per_lang: Vec<(String, f64)> = langs.iter().map(|l| (l.tag.clone(), l.wer)).collect();
        let tiers = langs.iter().map(|l| (l.tag.clone(), l.tier)).collect();
        let summary = tier_report(&per_lang, &tiers)?;
        Ok(Self {
            variant: variant.to_string(),
            seed,
            split: split.to_string(),
            langs,
            summary,
        })
    }

    pub fn overall(&self) -> f64 {
        self.summary.overall
    }

    pub fn tier(&self, tier: Tier) -> Option<f64> {
        self.summary.tiers.iter().find(|t| t.tier == tier).map(|t| t.wer)
    }

    pub fn truncated(&self) -> usize {
        self.langs.iter().map(|l| l.truncated).sum()
    }

    /// Tab-separated rows: one per language, one per tier average, overall.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("row\ttier\tunit\twer\tsub\tdel\tins\tref_len\tutterances\ttruncated\n");
        for l in &self.langs {
            let u = match l.unit {
                Unit::Word => "word",
                Unit::Char => "char",
            };
            let e = l.errors;
            writeln!(
                s,
                "{}\t{}\t{u}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.tag, l.tier, l.wer, e.sub, e.del, e.ins, l.ref_len, l.utterances, l.truncated
            )
            .unwrap();
        }
        for t in &self.summary.tiers {
            writeln!(s, "average\t{}\t\t{}\t\t\t\t\t{}\t", t.tier, t.wer, t.langs).unwrap();
        }
        writeln!(s, "overall\t\t\t{}\t\t\t\t\t{}\t{}", self.summary.overall, self.langs.len(), self.truncated()).unwrap();
        s
    }

    /// Aligned table with one-decimal values.
    pub fn to_text(&self) -> String {
        let mut s = format!("variant {}  seed {}  split {}\n", self.variant, self.seed, self.split);
        writeln!(s, "{:<10} {:>8} {:>8} {:>6}", "language", "tier", "wer", "utts").unwrap();
        for tier in Tier::ALL {
            let members: Vec<&LangResult> = self.langs.iter().filter(|l| l.tier == tier).collect();
            if members.is_empty() {
                continue;
            }
            for l in members {
                writeln!(s, "{:<10} {:>8} {:>8.1} {:>6}", l.tag, tier.label(), l.wer, l.utterances).unwrap();
            }
            if let Some(avg) = self.tier(tier) {
                writeln!(s, "{:<10} {:>8} {:>8.1}", "average", tier.label(), avg).unwrap();
            }
        }
        writeln!(s, "{:<10} {:>8} {:>8.1}", "overall", "", self.summary.overall).unwrap();
        if self.truncated() > 0 {
            writeln!(s, "truncated hypotheses: {}", self.truncated()).unwrap();
        }
        s
    }

    /// One JSON object per line: languages, tier averages, then overall.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for l in &self.langs {
            let v = serde_json::json!({
                "kind": "language", "variant": self.variant, "seed": self.seed, "split": self.split,
                "lang": l.tag, "tier": l.tier, "unit": l.unit, "wer": l.wer, "errors": l.errors,
                "ref_len": l.ref_len, "utterances": l.utterances, "truncated": l.truncated,
            });
            writeln!(s, "{v}").unwrap();
        }
        for t in &self.summary.tiers {
            let v = serde_json::json!({
                "kind": "tier", "variant": self.variant, "seed": self.seed, "split": self.split,
                "tier": t.tier, "wer": t.wer, "langs": t.langs,
            });
            writeln!(s, "{v}").unwrap();
        }
        let v = serde_json::json!({
            "kind": "overall", "variant": self.variant, "seed": self.seed, "split": self.split,
            "wer": self.summary.overall, "langs": self.langs.len(), "truncated": self.truncated(),
        });
        writeln!(s, "{v}").unwrap();
        s
    }
}
