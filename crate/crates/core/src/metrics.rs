//! Corpus evaluation: BLEU-1..4, an exact-match METEOR variant, ROUGE-L,
//! per-category label precision/recall/F1, relative improvement over a
//! baseline, and report-length histograms.
//!
//! Text inputs are tokenized with [`crate::vocab::tokenize`].

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const HISTOGRAM_BINS: usize = 10;
pub const HISTOGRAM_WIDTH: usize = 10;

fn tokenized<S: AsRef<str>>(texts: &[S]) -> Vec<Vec<String>> {
    texts.iter().map(|t| tokenize(t.as_ref())).collect()
}

fn check_corpus<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!("{} candidates but {} references", candidates.len(), references.len())));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus totals of clipped `n`-gram matches and candidate `n`-grams.
pub fn clipped_counts<S: AsRef<str>>(candidates: &[S], references: &[S], n: usize) -> Result<(usize, usize)> {
    check_corpus(candidates, references)?;
    let c = tokenized(candidates);
    let r = tokenized(references);
    Ok(clipped_tokens(&c, &r, n))
}

fn clipped_tokens(c: &[Vec<String>], r: &[Vec<String>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (cand, refr) in c.iter().zip(r) {
        let rc = ngram_counts(refr, n);
        for (gram, count) in ngram_counts(cand, n) {
            matched += count.min(rc.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    (matched, total)
}

/// Corpus BLEU-1 through BLEU-4: geometric mean of clipped n-gram precisions
/// with uniform weights and a brevity penalty, no smoothing. A zero
/// precision at any order up to `n` makes BLEU-`n` zero.
pub fn bleu<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<[f64; 4]> {
    check_corpus(candidates, references)?;
    let c = tokenized(candidates);
    let r = tokenized(references);
    let cand_len: usize = c.iter().map(Vec::len).sum();
    let ref_len: usize = r.iter().map(Vec::len).sum();
    let mut out = [0.0; 4];
    if cand_len == 0 {
        return Ok(out);
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut alive = true;
    for n in 1..=4 {
        let (m, t) = clipped_tokens(&c, &r, n);
        if m == 0 || t == 0 {
            alive = false;
        } else {
            log_sum += (m as f64 / t as f64).ln();
        }
        out[n - 1] = if alive { bp * (log_sum / n as f64).exp() } else { 0.0 };
    }
    Ok(out)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// LCS-based F-measure for one pair.
pub fn rouge_l_pair(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    rouge_l_tokens(&c, &r)
}

fn rouge_l_tokens(c: &[String], r: &[String]) -> f64 {
    let lcs = lcs_len(c, r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean pairwise ROUGE-L.
pub fn rouge_l<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c.as_ref(), r.as_ref())).sum();
    Ok(total / candidates.len() as f64)
}

/// Exact-match METEOR for one pair. The `i`-th occurrence of a word in the
/// candidate aligns with its `i`-th occurrence in the reference.
pub fn meteor_pair(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in r.iter().enumerate() {
        positions.entry(w.as_str()).or_default().push(j);
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut aligned: Vec<Option<usize>> = Vec::with_capacity(c.len());
    for w in &c {
        let k = seen.entry(w.as_str()).or_insert(0);
        let target = positions.get(w.as_str()).and_then(|p| p.get(*k)).copied();
        *k += 1;
        aligned.push(target);
    }
    let matches = aligned.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &aligned {
        match (prev, a) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let m = matches as f64;
    let p = m / c.len() as f64;
    let rec = m / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

/// Mean pairwise METEOR-lite.
pub fn meteor_lite<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| meteor_pair(c.as_ref(), r.as_ref())).sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Binary scores from confusion counts. A category that is neither
    /// predicted nor present scores 1 on all three; any other zero
    /// denominator gives 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp == 0 && tp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub per_category: Vec<Prf>,
    /// Unweighted mean of the per-category scores.
    pub macro_avg: Prf,
}

/// Per-category and macro-averaged label scores of predicted label sets
/// against gold sets over `categories` categories.
pub fn label_efficacy(predicted: &[Vec<usize>], gold: &[Vec<usize>], categories: usize) -> Result<LabelScores> {
    if predicted.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predicted label sets but {} gold sets",
            predicted.len(),
            gold.len()
        )));
    }
    if categories == 0 {
        return Err(Error::contract("no label categories"));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); categories];
    for (p, g) in predicted.iter().zip(gold) {
        for (c, count) in counts.iter_mut().enumerate() {
            match (p.contains(&c), g.contains(&c)) {
                (true, true) => count.0 += 1,
                (true, false) => count.1 += 1,
                (false, true) => count.2 += 1,
                (false, false) => {}
            }
        }
        if let Some(bad) = p.iter().chain(g).find(|&&c| c >= categories) {
            return Err(Error::contract(format!("label {bad} outside 0..{categories}")));
        }
    }
    let per_category: Vec<Prf> = counts.iter().map(|&(tp, fp, fn_)| Prf::from_counts(tp, fp, fn_)).collect();
    let k = categories as f64;
    let macro_avg = Prf {
        precision: per_category.iter().map(|s| s.precision).sum::<f64>() / k,
        recall: per_category.iter().map(|s| s.recall).sum::<f64>() / k,
        f1: per_category.iter().map(|s| s.f1).sum::<f64>() / k,
    };
    Ok(LabelScores { per_category, macro_avg })
}

/// The six text-generation scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NlgScores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

impl NlgScores {
    pub const NAMES: [&'static str; 6] = ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor", "rouge_l"];

    pub fn compute<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<Self> {
        let b = bleu(candidates, references)?;
        Ok(Self {
            bleu_1: b[0],
            bleu_2: b[1],
            bleu_3: b[2],
            bleu_4: b[3],
            meteor: meteor_lite(candidates, references)?,
            rouge_l: rouge_l(candidates, references)?,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4, self.meteor, self.rouge_l]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            bleu_1: v[0],
            bleu_2: v[1],
            bleu_3: v[2],
            bleu_4: v[3],
            meteor: v[4],
            rouge_l: v[5],
        }
    }
}

/// Mean relative change `(new - base) / base` over the six scores. Scores
/// whose baseline is zero are skipped with a warning; returns 0 when every
/// score is skipped.
pub fn avg_delta(new: &NlgScores, base: &NlgScores) -> f64 {
    let mut total = 0.0;
    let mut used = 0;
    for ((name, n), b) in NlgScores::NAMES.iter().zip(new.values()).zip(base.values()) {
        if b == 0.0 {
            log::warn!("baseline {name} is zero; excluded from the average relative change");
            continue;
        }
        total += (n - b) / b;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

/// Word-count histogram: `HISTOGRAM_BINS` bins of width `HISTOGRAM_WIDTH`
/// starting at 0, plus an overflow count for longer texts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bins: Vec<usize>,
    pub overflow: usize,
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.bins.iter().sum::<usize>() + self.overflow
    }

    /// `"lo-hi"` labels for the bins, then `">=100"`.
    pub fn labels() -> Vec<String> {
        (0..HISTOGRAM_BINS)
            .map(|i| format!("{}-{}", i * HISTOGRAM_WIDTH, (i + 1) * HISTOGRAM_WIDTH - 1))
            .chain(std::iter::once(format!(">={}", HISTOGRAM_BINS * HISTOGRAM_WIDTH)))
            .collect()
    }
}

pub fn length_histogram<S: AsRef<str>>(texts: &[S]) -> LengthHistogram {
    let mut h = LengthHistogram {
        bins: vec![0; HISTOGRAM_BINS],
        overflow: 0,
    };
    for t in texts {
        let bin = tokenize(t.as_ref()).len() / HISTOGRAM_WIDTH;
        match h.bins.get_mut(bin) {
            Some(b) => *b += 1,
            None => h.overflow += 1,
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub scores: NlgScores,
    pub avg_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub nlg: NlgScores,
    pub labels: LabelScores,
    pub lengths: LengthHistogram,
    pub reference_lengths: LengthHistogram,
    pub baseline: Option<Baseline>,
}

impl MetricsReport {
    /// Scores `hypotheses` against `references`, with label sets extracted
    /// by `parse_labels`.
    pub fn compute<S, F>(hypotheses: &[S], references: &[S], gold_labels: &[Vec<usize>], categories: usize, parse_labels: F) -> Result<Self>
    where
        S: AsRef<str>,
        F: Fn(&str) -> Vec<usize>,
    {
        let nlg = NlgScores::compute(hypotheses, references)?;
        let predicted: Vec<Vec<usize>> = hypotheses.iter().map(|h| parse_labels(h.as_ref())).collect();
        Ok(Self {
            samples: hypotheses.len(),
            nlg,
            labels: label_efficacy(&predicted, gold_labels, categories)?,
            lengths: length_histogram(hypotheses),
            reference_lengths: length_histogram(references),
            baseline: None,
        })
    }

    pub fn with_baseline(mut self, name: &str, base: &NlgScores) -> Self {
        self.baseline = Some(Baseline {
            name: name.to_string(),
            scores: *base,
            avg_delta: avg_delta(&self.nlg, base),
        });
        self
    }

    /// Flat `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples = {}", self.samples);
        for (name, v) in NlgScores::NAMES.iter().zip(self.nlg.values()) {
            let _ = writeln!(s, "{name} = {v:.6}");
        }
        let m = &self.labels.macro_avg;
        let _ = writeln!(s, "label_precision = {:.6}", m.precision);
        let _ = writeln!(s, "label_recall = {:.6}", m.recall);
        let _ = writeln!(s, "label_f1 = {:.6}", m.f1);
        for (i, c) in self.labels.per_category.iter().enumerate() {
            let _ = writeln!(s, "label_{i}_precision = {:.6}", c.precision);
            let _ = writeln!(s, "label_{i}_recall = {:.6}", c.recall);
            let _ = writeln!(s, "label_{i}_f1 = {:.6}", c.f1);
        }
        for (label, count) in LengthHistogram::labels().iter().zip(self.lengths.bins.iter().chain([&self.lengths.overflow])) {
            let _ = writeln!(s, "length_{label} = {count}");
        }
        if let Some(b) = &self.baseline {
            let _ = writeln!(s, "baseline = {}", b.name);
            let _ = writeln!(s, "avg_delta = {:.6}", b.avg_delta);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn bleu_identity_and_empty() {
        let c = ["the cat sat on the mat", "a b c d e"];
        for v in bleu(&c, &c).unwrap() {
            close(v, 1.0);
        }
        assert_eq!(bleu(&[""], &["the cat"]).unwrap(), [0.0; 4]);
        assert!(bleu::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn clipped_unigram_precision() {
        let c = ["the the the the the the the"];
        let r = ["the cat is on the mat"];
        assert_eq!(clipped_counts(&c, &r, 1).unwrap(), (2, 7));
        close(bleu(&c, &r).unwrap()[0], 2.0 / 7.0);
    }

    #[test]
    fn rouge_cases() {
        close(rouge_l_pair("a b c", "a b c"), 1.0);
        close(rouge_l_pair("x y", "a b c"), 0.0);
        // lcs 3, P = 1, R = 0.75
        close(rouge_l_pair("a c d", "a b c d"), 2.44 * 0.75 / (0.75 + 1.44));
    }

    #[test]
    fn meteor_cases() {
        close(meteor_pair("a b c d", "a b c d"), 1.0 - 0.5 / 64.0);
        close(meteor_pair("x", "a"), 0.0);
        assert!(meteor_pair("c d a b", "a b c d") < meteor_pair("a b c d", "a b c d"));
    }

    #[test]
    fn label_conventions() {
        let gold = vec![vec![0], vec![1], vec![]];
        let s = label_efficacy(&gold, &gold, 3).unwrap();
        close(s.macro_avg.f1, 1.0);
        let none = vec![vec![], vec![], vec![]];
        let s = label_efficacy(&none, &gold, 3).unwrap();
        close(s.per_category[0].recall, 0.0);
        close(s.per_category[1].recall, 0.0);
        close(s.per_category[2].f1, 1.0);
    }

    #[test]
    fn avg_delta_cases() {
        let base = NlgScores::from_values([0.4, 0.3, 0.2, 0.1, 0.2, 0.3]);
        close(avg_delta(&base, &base), 0.0);
        let better = NlgScores::from_values(base.values().map(|v| v * 1.1));
        close(avg_delta(&better, &base), 0.1);
        let zero = NlgScores::from_values([0.4, 0.3, 0.2, 0.0, 0.2, 0.3]);
        close(avg_delta(&better, &zero), 0.1);
    }

    #[test]
    fn histogram_bins() {
        let words = |n: usize| vec!["w"; n].join(" ");
        let h = length_histogram(&[words(37), words(0), words(9), words(10), words(100), words(99)]);
        assert_eq!(h.bins, vec![2, 1, 0, 1, 0, 0, 0, 0, 0, 1]);
        assert_eq!(h.overflow, 1);
        assert_eq!(h.total(), 6);
        assert_eq!(length_histogram::<&str>(&[]).total(), 0);
        assert_eq!(LengthHistogram::labels()[3], "30-39");
    }
}
