//! ROUGE, BLEU, span EM/F1 and accuracy.
//!
//! Metrics take token slices of any `Eq + Hash` type, so they work on ids
//! and on strings alike.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{bail, Result};

/// Precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(hits: usize, cand: usize, reference: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { hits as f64 / cand as f64 };
        let recall = if reference == 0 { 0.0 } else { hits as f64 / reference as f64 };
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap<T: Eq + Hash>(cand: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// ROUGE-N with clipped n-gram counts.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<Prf> {
    if n == 0 {
        bail!(Config, "rouge n must be at least 1");
    }
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits = clipped_overlap(&c, &r);
    Ok(Prf::from_counts(
        hits,
        cand.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

/// Longest common subsequence length, `O(|a|·|b|)` dynamic program.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

/// Lowercases string tokens before scoring.
pub fn fold_case<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

/// Mean ROUGE-1/2/L F1 over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

pub fn corpus_rouge<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>]) -> Result<RougeScores> {
    check_lengths(cands.len(), refs.len())?;
    let n = cands.len() as f64;
    let mut s = RougeScores::default();
    for (c, r) in cands.iter().zip(refs) {
        s.rouge1 += rouge_n(c, r, 1)?.f1;
        s.rouge2 += rouge_n(c, r, 2)?.f1;
        s.rouge_l += rouge_l(c, r).f1;
    }
    s.rouge1 /= n;
    s.rouge2 /= n;
    s.rouge_l /= n;
    Ok(s)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(Contract, "{a} predictions for {b} references");
    }
    if a == 0 {
        bail!(Contract, "empty evaluation set");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub cand_len: usize,
    pub ref_len: usize,
}

/// Brevity penalty `e^{1 − r/c}` for `c < r`, else 1.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    }
}

/// Corpus BLEU with clipped precisions up to `max_n`. With `smooth`, every
/// order adds one to its hit and total counts (orders above the first).
pub fn bleu<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], max_n: usize, smooth: bool) -> Result<BleuScore> {
    check_lengths(cands.len(), refs.len())?;
    if max_n == 0 {
        bail!(Config, "max_n must be at least 1");
    }
    let mut hits = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            hits[n - 1] += clipped_overlap(&cc, &rc);
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (h, t) = if smooth && i > 0 { (hits[i] + 1, totals[i] + 1) } else { (hits[i], totals[i]) };
            if t == 0 {
                0.0
            } else {
                h as f64 / t as f64
            }
        })
        .collect();
    let bp = brevity_penalty(c_len, r_len);
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty: bp,
        cand_len: c_len,
        ref_len: r_len,
    })
}

/// Exact match and token-overlap F1 of a predicted span.
pub fn span_em_f1<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Result<(f64, f64)> {
    if gold.is_empty() {
        bail!(Contract, "gold span is empty");
    }
    let em = if pred == gold { 1.0 } else { 0.0 };
    let hits = clipped_overlap(&ngram_counts(pred, 1), &ngram_counts(gold, 1));
    Ok((em, Prf::from_counts(hits, pred.len(), gold.len()).f1))
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

/// Area under the ROC curve (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        bail!(Contract, "auc needs both classes");
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// One named metric with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub score: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn scalar(metric: impl Into<String>, score: f64, count: usize) -> Self {
        Self {
            metric: metric.into(),
            precision: None,
            recall: None,
            score,
            count,
        }
    }

    pub fn prf(metric: impl Into<String>, prf: Prf, count: usize) -> Self {
        Self {
            metric: metric.into(),
            precision: Some(prf.precision),
            recall: Some(prf.recall),
            score: prf.f1,
            count,
        }
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = format!("{}.score={:.6}\n{}.count={}\n", self.metric, self.score, self.metric, self.count);
        if let Some(p) = self.precision {
            out += &format!("{}.precision={p:.6}\n", self.metric);
        }
        if let Some(r) = self.recall {
            out += &format!("{}.recall={r:.6}\n", self.metric);
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        write!(
            f,
            "{:<12} {:>8} {:>8} {:>8.4} {:>6}",
            self.metric,
            opt(self.precision),
            opt(self.recall),
            self.score,
            self.count
        )
    }
}

/// Table header matching [`MetricReport`]'s `Display`.
pub const REPORT_HEADER: &str = "metric              P        R    score      n";
