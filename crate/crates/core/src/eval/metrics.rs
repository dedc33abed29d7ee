use serde::Serialize;

use crate::error::{Error, Result};

/// Levenshtein alignment with unit costs, split by operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub dist: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.dist += o.dist;
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Minimum edit distance turning `r` into `h`, with one optimal alignment's
/// substitution / deletion / insertion counts.
pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> EditCounts {
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }
    let mut c = EditCounts {
        dist: d[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            c.sub += usize::from(r[i - 1] != h[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// Scoring unit of a language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Unit {
    /// Whitespace-separated words.
    Word,
    /// Non-space characters.
    Char,
}

pub fn units(text: &str, unit: Unit) -> Vec<String> {
    match unit {
        Unit::Word => text.split_whitespace().map(str::to_string).collect(),
        Unit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

/// Corpus error counts and reference length in `unit`s.
pub fn corpus_errors(refs: &[&str], hyps: &[&str], unit: Unit) -> Result<(EditCounts, usize)> {
    if refs.len() != hyps.len() {
        return Err(Error::Usage(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = EditCounts::default();
    let mut ref_len = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (units(r, unit), units(h, unit));
        total += edit_distance(&r, &h);
        ref_len += r.len();
    }
    Ok((total, ref_len))
}

/// Error rate in percent: `100 * edits / reference units`.
pub fn error_rate(refs: &[&str], hyps: &[&str], unit: Unit) -> Result<f64> {
    let (c, n) = corpus_errors(refs, hyps, unit)?;
    if n == 0 {
        return Err(Error::UndefinedMetric("error rate over an empty reference".into()));
    }
    Ok(100.0 * c.dist as f64 / n as f64)
}

/// Word error rate in percent.
pub fn wer(refs: &[&str], hyps: &[&str]) -> Result<f64> {
    error_rate(refs, hyps, Unit::Word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).dist, 0);
        assert_eq!(wer(&["a b", "c"], &["a b", "c"]).unwrap(), 0.0);
    }

    #[test]
    fn single_substitution() {
        let c = edit_distance(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!((c.dist, c.sub, c.del, c.ins), (1, 1, 0, 0));
        assert_eq!(wer(&["a b c d"], &["a b x d"]).unwrap(), 25.0);
    }

    #[test]
    fn insertions_exceed_hundred() {
        assert_eq!(wer(&["a"], &["x y z"]).unwrap(), 300.0);
    }

    #[test]
    fn empty_reference_is_undefined() {
        assert!(matches!(wer(&[""], &["a"]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(wer(&["a"], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn decomposition_sums() {
        let c = edit_distance(b"kitten", b"sitting");
        assert_eq!(c.dist, 3);
        assert_eq!(c.sub + c.del + c.ins, 3);
        let c = edit_distance::<u8>(b"", b"abc");
        assert_eq!((c.dist, c.ins), (3, 3));
    }

    #[test]
    fn char_units_ignore_spaces() {
        assert_eq!(units("ab c", Unit::Char), ["a", "b", "c"]);
        assert_eq!(error_rate(&["ab c"], &["abc"], Unit::Char).unwrap(), 0.0);
    }
}
