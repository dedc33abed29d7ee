//! The ablation ladder: every variant trained on one corpus over several
//! seeds, summarized as a language × variant matrix of median error rates
//! with directional checks.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Corpus, Tier};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeOptions, EvalReport};
use crate::model::{build_model, AblationVariant, Checkpoint};
use crate::params::fnv1a;
use crate::train::{fit, EvalRecord};

/// One trained and evaluated (variant, seed) cell.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: AblationVariant,
    pub seed: u64,
    pub trainable: usize,
    /// Test-split report of the best-dev checkpoint, or the failure.
    pub result: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: EvalReport,
    pub best_update: usize,
    pub best_loss_update: usize,
    pub log: Vec<EvalRecord>,
}

/// Trains `variant` with `seed` and evaluates its best-dev checkpoint.
pub fn run_variant(
    corpus: &Corpus,
    cfg: &RunConfig,
    variant: AblationVariant,
    seed: u64,
    enc: Option<&Checkpoint>,
    dec: Option<&Checkpoint>,
    on_record: impl FnMut(&EvalRecord),
) -> Result<(RunSummary, usize)> {
    let mut model = build_model(&cfg.model, variant, enc, dec, seed)?;
    let trainable = model.trainable_count();
    let fitted = fit(&mut model, corpus, cfg, seed, on_record)?;
    let best = crate::model::Model::from_checkpoint_with(&fitted.best, &model.config)?;
    let opts = DecodeOptions::from_config(&cfg.eval)?;
    let (mut report, _) = evaluate(&best, corpus, "test", &opts, cfg.eval.max_per_lang)?;
    report.seed = seed;
    Ok((
        RunSummary {
            report,
            best_update: fitted.best_update,
            best_loss_update: fitted.best_loss_update,
            log: fitted.log,
        },
        trainable,
    ))
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Pass/fail of one directional check; `pass` is `None` when a needed cell
/// is missing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: &'static str,
    pub description: &'static str,
    pub pass: Option<bool>,
    pub detail: String,
}

/// Median-over-seed summary of an ablation.
#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub langs: Vec<(String, Tier)>,
    /// `cells[lang][variant]`, median over successful seeds.
    pub cells: Vec<Vec<Option<f64>>>,
    /// `(tier, per-variant macro average of the median cells)`.
    pub tiers: Vec<(Tier, Vec<Option<f64>>)>,
    pub overall: Vec<Option<f64>>,
    /// Median over seeds of the update with the lowest dev loss.
    pub best_loss_update: Vec<Option<f64>>,
    pub trainable: Vec<Option<usize>>,
    pub failures: Vec<String>,
    pub criteria: Vec<CriterionResult>,
}

fn col(v: AblationVariant) -> usize {
    AblationVariant::ALL.iter().position(|&x| x == v).expect("listed")
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn rel(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        0.0
    } else {
        100.0 * (from - to) / from
    }
}

impl AblationTable {
    pub fn new(corpus: &Corpus, runs: &[RunOutcome]) -> Self {
        let langs: Vec<(String, Tier)> = corpus.langs.iter().map(|l| (l.tag.clone(), l.tier)).collect();
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let nv = AblationVariant::ALL.len();
        let ok = |v: AblationVariant| runs.iter().filter(move |r| r.variant == v).filter_map(|r| r.result.as_ref().ok());
        let cells: Vec<Vec<Option<f64>>> = langs
            .iter()
            .map(|(tag, _)| {
                AblationVariant::ALL
                    .iter()
                    .map(|&v| {
                        let w: Vec<f64> = ok(v)
                            .filter_map(|s| s.report.langs.iter().find(|l| &l.tag == tag).map(|l| l.wer))
                            .collect();
                        median(&w)
                    })
                    .collect()
            })
            .collect();
        let mut tiers = Vec::new();
        for tier in Tier::ALL {
            let rows: Vec<usize> = (0..langs.len()).filter(|&i| langs[i].1 == tier).collect();
            if rows.is_empty() {
                continue;
            }
            let avg = (0..nv)
                .map(|c| mean_opt(&rows.iter().map(|&r| cells[r][c]).collect::<Vec<_>>()))
                .collect();
            tiers.push((tier, avg));
        }
        let overall = (0..nv)
            .map(|c| mean_opt(&cells.iter().map(|row| row[c]).collect::<Vec<_>>()))
            .collect();
        let best_loss_update = AblationVariant::ALL
            .iter()
            .map(|&v| median(&ok(v).map(|s| s.best_loss_update as f64).collect::<Vec<_>>()))
            .collect();
        let trainable = AblationVariant::ALL
            .iter()
            .map(|&v| runs.iter().find(|r| r.variant == v).map(|r| r.trainable))
            .collect();
        let failures = runs
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|e| format!("{} seed {}: {e}", r.variant, r.seed)))
            .collect();
        let mut t = Self {
            seeds,
            langs,
            cells,
            tiers,
            overall,
            best_loss_update,
            trainable,
            failures,
            criteria: Vec::new(),
        };
        t.criteria = t.directional();
        t
    }

    pub fn tier(&self, tier: Tier, v: AblationVariant) -> Option<f64> {
        self.tiers.iter().find(|(t, _)| *t == tier).and_then(|(_, row)| row[col(v)])
    }

    pub fn overall(&self, v: AblationVariant) -> Option<f64> {
        self.overall[col(v)]
    }

    fn directional(&self) -> Vec<CriterionResult> {
        use AblationVariant::*;
        let o = |v| self.overall(v);
        let a = match (o(Wm), o(W), o(Tf)) {
            (Some(wm), Some(w), Some(tf)) => (Some(wm <= w && w <= tf), format!("WM {wm:.1} <= W {w:.1} <= TF {tf:.1}")),
            _ => (None, "missing overall cells".into()),
        };
        let b = match (self.tier(Tier::VeryLow, Wm), self.tier(Tier::VeryLow, Wmf)) {
            (Some(wm), Some(wmf)) => {
                let r = rel(wm, wmf);
                (Some(r >= 5.0), format!("very-low WM {wm:.1} -> WMF {wmf:.1} ({r:.1}% relative)"))
            }
            _ => (None, "missing very-low cells".into()),
        };
        let c = match (o(Fwmf), o(Fwma)) {
            (Some(f), Some(a)) => (Some(f <= a), format!("FWMF {f:.1} <= FWMA {a:.1}")),
            _ => (None, "missing frozen cells".into()),
        };
        let bl = |v| self.best_loss_update[col(v)];
        let d = match (bl(W), bl(Tf)) {
            (Some(w), Some(tf)) => (Some(w < tf), format!("best dev loss at update W {w:.0} < TF {tf:.0}")),
            _ => (None, "missing convergence data".into()),
        };
        [
            ("7a", "overall WER: WM <= W <= TF", a),
            ("7b", "very-low tier: WMF improves over WM by >= 5% relative", b),
            ("7c", "frozen regimes: FWMF <= FWMA overall", c),
            ("7d", "convergence: W reaches its best dev loss before TF", d),
        ]
        .into_iter()
        .map(|(id, description, (pass, detail))| CriterionResult {
            id,
            description,
            pass,
            detail,
        })
        .collect()
    }

    /// Every directional check evaluated and passing.
    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass == Some(true))
    }

    pub fn any_unevaluable(&self) -> bool {
        self.criteria.iter().any(|c| c.pass.is_none())
    }

    /// `WM vs W` and `WMF vs WM` relative improvements per tier and overall.
    pub fn deltas(&self) -> Vec<(String, Option<f64>, Option<f64>)> {
        use AblationVariant::*;
        let mut out: Vec<(String, Option<f64>, Option<f64>)> = self
            .tiers
            .iter()
            .map(|(t, row)| {
                let d = |from: AblationVariant, to: AblationVariant| Some(rel(row[col(from)]?, row[col(to)]?));
                (t.label().to_string(), d(W, Wm), d(Wm, Wmf))
            })
            .collect();
        let d = |from, to| Some(rel(self.overall(from)?, self.overall(to)?));
        out.push(("overall".into(), d(W, Wm), d(Wm, Wmf)));
        out
    }

    /// Tab-separated matrix: languages, tier averages, overall.
    pub fn to_tsv(&self) -> String {
        let cell = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.4}"));
        let mut s = String::from("row\ttier");
        for v in AblationVariant::ALL {
            write!(s, "\t{v}").unwrap();
        }
        s.push('\n');
        for ((tag, tier), row) in self.langs.iter().zip(&self.cells) {
            write!(s, "{tag}\t{tier}").unwrap();
            for &x in row {
                write!(s, "\t{}", cell(x)).unwrap();
            }
            s.push('\n');
        }
        for (tier, row) in &self.tiers {
            write!(s, "average\t{tier}").unwrap();
            for &x in row {
                write!(s, "\t{}", cell(x)).unwrap();
            }
            s.push('\n');
        }
        write!(s, "overall\t").unwrap();
        for &x in &self.overall {
            write!(s, "\t{}", cell(x)).unwrap();
        }
        s.push('\n');
        s
    }

    /// Table-1-style aligned text plus the directional summary.
    pub fn to_text(&self) -> String {
        let cell = |x: Option<f64>| x.map_or("--".to_string(), |v| format!("{v:.1}"));
        let mut s = format!("median WER over seeds {:?}\n", self.seeds);
        write!(s, "{:<12}", "language").unwrap();
        for v in AblationVariant::ALL {
            write!(s, " {:>7}", v.label()).unwrap();
        }
        s.push('\n');
        for tier in Tier::ALL {
            let rows: Vec<usize> = (0..self.langs.len()).filter(|&i| self.langs[i].1 == tier).collect();
            if rows.is_empty() {
                continue;
            }
            for r in rows {
                write!(s, "{:<12}", self.langs[r].0).unwrap();
                for &x in &self.cells[r] {
                    write!(s, " {:>7}", cell(x)).unwrap();
                }
                s.push('\n');
            }
            write!(s, "{:<12}", format!("avg {}", tier.label())).unwrap();
            for v in AblationVariant::ALL {
                write!(s, " {:>7}", cell(self.tier(tier, v))).unwrap();
            }
            s.push('\n');
        }
        write!(s, "{:<12}", "overall").unwrap();
        for &x in &self.overall {
            write!(s, " {:>7}", cell(x)).unwrap();
        }
        s.push('\n');
        write!(s, "{:<12}", "trainable").unwrap();
        for &x in &self.trainable {
            write!(s, " {:>7}", x.map_or("--".into(), |n| n.to_string())).unwrap();
        }
        s.push('\n');
        write!(s, "{:<12}", "best loss@").unwrap();
        for &x in &self.best_loss_update {
            write!(s, " {:>7}", x.map_or("--".into(), |n| format!("{n:.0}"))).unwrap();
        }
        s.push_str("\n\nrelative WER reduction (%)   WM vs W   WMF vs WM\n");
        for (name, a, b) in self.deltas() {
            writeln!(s, "{name:<28} {:>8} {:>11}", cell(a), cell(b)).unwrap();
        }
        s.push('\n');
        for c in &self.criteria {
            let verdict = match c.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "N/A",
            };
            writeln!(s, "[{verdict}] {} {}: {}", c.id, c.description, c.detail).unwrap();
        }
        for f in &self.failures {
            writeln!(s, "failed run: {f}").unwrap();
        }
        s
    }
}

/// Stable checksum of a checkpoint's serialized bytes.
pub fn checksum(ckpt: &Checkpoint) -> String {
    format!("{:016x}", fnv1a(&ckpt.to_bytes()))
}

/// Runs every variant for each seed, in (variant, seed) order. Sub-run
/// failures are recorded, not raised.
pub fn run_ablation(
    corpus: &Corpus,
    cfg: &RunConfig,
    seeds: &[u64],
    enc: &Checkpoint,
    dec: &Checkpoint,
    mut on_run: impl FnMut(&RunOutcome),
) -> Result<Vec<RunOutcome>> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for v in AblationVariant::ALL {
        for &seed in seeds {
            let (result, trainable) = match run_variant(corpus, cfg, v, seed, Some(enc), Some(dec), |_| {}) {
                Ok((s, n)) => (Ok(s), n),
                Err(e @ Error::Numerical { .. }) | Err(e @ Error::Data(_)) => (Err(e.to_string()), 0),
                Err(e) => return Err(e),
            };
            let out = RunOutcome {
                variant: v,
                seed,
                trainable,
                result,
            };
            on_run(&out);
            runs.push(out);
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn relative_change() {
        assert_eq!(rel(40.0, 30.0), 25.0);
    }
}
