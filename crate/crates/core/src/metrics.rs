//! Corpus BLEU and ROUGE-L, both reported on a 0-100 scale.
//!
//! BLEU clips n-gram counts against every reference, uses the closest
//! reference length for the brevity penalty and adds `1e-9` to zero
//! numerators. Orders for which the hypotheses contain no n-grams at all are
//! left out of the geometric mean, so a short sentence scored against
//! itself still gets 100.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_SMOOTHING: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total hypothesis n-grams for one sentence.
pub fn modified_precision<T: Eq + Hash, R: AsRef<[T]>>(hypothesis: &[T], references: &[R], n: usize) -> (usize, usize) {
    let hyp = ngram_counts(hypothesis, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (gram, c) in ngram_counts(r.as_ref(), n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(c);
        }
    }
    let matched = hyp
        .iter()
        .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.values().sum())
}

fn closest_ref_len<R>(hyp_len: usize, references: &[R], len: impl Fn(&R) -> usize) -> usize {
    references
        .iter()
        .map(len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Eval(format!("{hyps} hypotheses but {refs} reference sets")));
    }
    Ok(())
}

/// Corpus-level BLEU with n-gram orders `1..=max_n`.
pub fn corpus_bleu<T, H, R>(hypotheses: &[H], references: &[Vec<R>], max_n: usize) -> Result<f64>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_lengths(hypotheses.len(), references.len())?;
    if max_n == 0 {
        return Err(Error::Eval("max_n must be at least 1".into()));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Eval("every hypothesis needs at least one reference".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, refs) in hypotheses.iter().zip(references) {
        let h = h.as_ref();
        hyp_len += h.len();
        ref_len += closest_ref_len(h.len(), refs, |r| r.as_ref().len());
        for n in 1..=max_n {
            let (m, t) = modified_precision(h, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let orders: Vec<f64> = matched
        .iter()
        .zip(&total)
        .filter(|(_, &t)| t > 0)
        .map(|(&m, &t)| {
            let num = if m == 0 { BLEU_SMOOTHING } else { m as f64 };
            (num / t as f64).ln()
        })
        .collect();
    let log_mean = orders.iter().sum::<f64>() / orders.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_mean.exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-score (beta = 1) of one pair, as a fraction in [0, 1].
pub fn rouge_l<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if hypothesis.is_empty() || reference.is_empty() {
        return Err(Error::Eval("ROUGE-L needs non-empty hypothesis and reference".into()));
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Best [`rouge_l`] over several references.
pub fn rouge_l_multi<T: PartialEq, R: AsRef<[T]>>(hypothesis: &[T], references: &[R]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Eval("no reference given".into()));
    }
    references
        .iter()
        .map(|r| rouge_l(hypothesis, r.as_ref()))
        .try_fold(0.0f64, |best, f| Ok(best.max(f?)))
}

/// Mean per-pair ROUGE-L F-score, scaled to 0-100.
pub fn corpus_rouge_l<T, H, R>(hypotheses: &[H], references: &[Vec<R>]) -> Result<f64>
where
    T: PartialEq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_lengths(hypotheses.len(), references.len())?;
    if hypotheses.is_empty() {
        return Err(Error::Eval("empty corpus".into()));
    }
    let mut sum = 0.0;
    for (h, refs) in hypotheses.iter().zip(references) {
        sum += rouge_l_multi(h.as_ref(), refs)?;
    }
    Ok(100.0 * sum / hypotheses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub rouge_l_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub rouge_l_f: f64,
    pub examples: Vec<ExampleScore>,
}

pub fn evaluate<H: AsRef<[String]>, R: AsRef<[String]>>(hypotheses: &[H], references: &[Vec<R>]) -> Result<EvalReport> {
    let bleu = corpus_bleu(hypotheses, references, 4)?;
    let rouge = corpus_rouge_l(hypotheses, references)?;
    let examples = hypotheses
        .iter()
        .zip(references)
        .enumerate()
        .map(|(index, (h, refs))| {
            Ok(ExampleScore {
                index,
                rouge_l_f: 100.0 * rouge_l_multi(h.as_ref(), refs)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        bleu,
        rouge_l_f: rouge,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn clipped_unigram_precision() {
        let (m, t) = modified_precision(&toks("the the the"), &[toks("the cat")], 1);
        assert_eq!((m, t), (1, 3));
    }

    #[test]
    fn identical_corpus_scores_100() {
        let hyps = vec![toks("a b c d e"), toks("x y"), toks("z")];
        let refs: Vec<Vec<Vec<String>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        assert!((corpus_bleu(&hyps, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
        assert!((corpus_rouge_l(&hyps, &refs).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tokens_score_near_zero() {
        let hyps = vec![toks("a b c d")];
        let refs = vec![vec![toks("w x y z")]];
        assert!(corpus_bleu(&hyps, &refs, 4).unwrap() < 1e-6);
        assert_eq!(corpus_rouge_l(&hyps, &refs).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_example() {
        let f = rouge_l(&toks("a b c d"), &toks("a c d")).unwrap();
        assert!((100.0 * f - 600.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let empty: Vec<String> = Vec::new();
        assert!(matches!(rouge_l(&empty, &toks("a")), Err(Error::Eval(_))));
        let hyps = vec![toks("a")];
        let refs: Vec<Vec<Vec<String>>> = Vec::new();
        assert!(matches!(corpus_bleu(&hyps, &refs, 4), Err(Error::Eval(_))));
    }
}
