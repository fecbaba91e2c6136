//! Evaluation metrics. Ties are broken toward the lowest index everywhere.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{grounding_hit, RegionScoreMap};
use crate::tensor::{cosine, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Rows are image queries ranking text columns.
    ImageToText,
    /// Columns are text queries ranking image rows.
    TextToImage,
}

/// Fraction of queries whose diagonal match ranks within the top `k`.
///
/// A competitor outranks the true match when its score is higher, or equal
/// with a lower index.
pub fn recall_at_k(s: &Matrix<f64>, k: usize, direction: Direction) -> Result<f64> {
    let b = s.rows();
    if b == 0 || s.cols() != b {
        return Err(Error::Shape(format!("similarity matrix must be square and non-empty, got {:?}", s.shape())));
    }
    if k == 0 || k > b {
        return Err(Error::OutOfRange(format!("k = {k} outside 1..={b}")));
    }
    let at = |q: usize, c: usize| match direction {
        Direction::ImageToText => s[(q, c)],
        Direction::TextToImage => s[(c, q)],
    };
    let hits = (0..b)
        .filter(|&q| {
            let own = at(q, q);
            let ahead = (0..b)
                .filter(|&c| c != q && (at(q, c) > own || (at(q, c) == own && c < q)))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// Cosine of each slide embedding (rows) against each class prompt (rows), `slides × classes`.
pub fn zero_shot_scores(slides: &Matrix<f64>, prompts: &Matrix<f64>) -> Result<Matrix<f64>> {
    if prompts.rows() == 0 {
        return Err(Error::Empty("no class prompts".into()));
    }
    if slides.cols() != prompts.cols() {
        return Err(Error::Shape(format!("slide dim {} vs prompt dim {}", slides.cols(), prompts.cols())));
    }
    let mut out = Matrix::zeros(slides.rows(), prompts.rows());
    for i in 0..slides.rows() {
        for c in 0..prompts.rows() {
            out[(i, c)] = match cosine(slides.row(i), prompts.row(c)) {
                Some(v) => v,
                None if slides.row(i).iter().all(|&x| x == 0.0) => return Err(Error::ZeroNorm { which: "slide", index: i }),
                None => return Err(Error::ZeroNorm { which: "prompt", index: c }),
            };
        }
    }
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `P(score⁺ > score⁻) + ½ P(tie)` over all positive–negative pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config("AUC needs both positive and negative labels".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Single-reference BLEU with orders `1..=n`, clipped precision and brevity penalty.
/// An empty candidate scores 0.
pub fn bleu_n<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::OutOfRange("BLEU order must be >= 1".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let refc = ngram_counts(reference, order);
        let total: usize = cand.values().sum();
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += Float::ln(clipped as f64 / total as f64);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { Float::exp(1.0 - r / c) } else { 1.0 };
    Ok(bp * Float::exp(log_sum / n as f64))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("ROUGE-L reference is empty".into()));
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Fraction of `(map, planted region)` cases that are grounding hits.
pub fn grounding_accuracy(cases: &[(RegionScoreMap, usize)], margin: f64) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    let hits = cases.iter().filter(|(m, p)| grounding_hit(m, *p, margin)).count();
    hits as f64 / cases.len() as f64
}

/// Share of the most frequent answer; the accuracy of always predicting it.
pub fn majority_baseline<T: Ord>(train_answers: &[T], test_answers: &[T]) -> f64 {
    let counts = ngram_counts(train_answers, 1);
    let Some((best, _)) = counts.iter().fold(None, |acc: Option<(&[T], usize)>, (k, &v)| match acc {
        Some((_, bv)) if bv >= v => acc,
        _ => Some((k, v)),
    }) else {
        return 0.0;
    };
    if test_answers.is_empty() {
        return 0.0;
    }
    test_answers.iter().filter(|a| **a == best[0]).count() as f64 / test_answers.len() as f64
}
