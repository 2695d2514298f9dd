//! Character-level sentence BLEU and the gain arithmetic used in size sweeps.
//!
//! Each sentence is scored against one reference with modified 1- to 4-gram
//! precisions and a brevity penalty. Orders n >= 2 whose clipped match count is
//! zero get `epsilon` matches instead, so short or loosely matching sentences
//! still receive a finite, comparable score. A zero unigram match makes the
//! score 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum BleuError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("cannot average an empty list of scores")]
    EmptyScores,
    #[error("baseline mean must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("smoothing epsilon must be in (0, 1], got {0}")]
    BadEpsilon(f64),
    #[error("no size-0 baseline among the sweep means")]
    MissingBaseline,
}

/// One token per non-whitespace character, after NFC. Case is preserved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(Vec<char>);

impl TokenSeq {
    pub fn tokens(&self) -> &[char] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize_chars(text: &str) -> TokenSeq {
    TokenSeq(text.nfc().filter(|c| !c.is_whitespace()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0..=100
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothing_applied: bool,
    pub epsilon: f64,
}

fn ngram_counts(tokens: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sentence_bleu(hyp: &TokenSeq, reference: &TokenSeq) -> Result<BleuScore, BleuError> {
    sentence_bleu_with(hyp, reference, DEFAULT_EPSILON)
}

pub fn sentence_bleu_with(hyp: &TokenSeq, reference: &TokenSeq, epsilon: f64) -> Result<BleuScore, BleuError> {
    if reference.is_empty() {
        return Err(BleuError::EmptyReference);
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(BleuError::BadEpsilon(epsilon));
    }
    let (h, r) = (hyp.tokens(), reference.tokens());
    let mut precisions = [0.0; MAX_ORDER];
    let mut smoothing_applied = false;
    let mut unigram_miss = false;
    for (i, p) in precisions.iter_mut().enumerate() {
        let n = i + 1;
        let hyp_counts = ngram_counts(h, n);
        let ref_counts = ngram_counts(r, n);
        let matches: usize = hyp_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let denominator = (h.len() + 1).saturating_sub(n).max(1) as f64;
        *p = if matches > 0 {
            matches as f64 / denominator
        } else if n == 1 {
            unigram_miss = true;
            0.0
        } else {
            smoothing_applied = true;
            epsilon / denominator
        };
    }
    let (c, rl) = (h.len(), r.len());
    // an empty hypothesis has no unigram matches; its score is 0 regardless
    let bp = if c >= rl {
        1.0
    } else {
        (1.0 - rl as f64 / c.max(1) as f64).exp()
    };
    let score = if unigram_miss {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        bp,
        hyp_len: c,
        ref_len: rl,
        smoothing_applied,
        epsilon,
    })
}

/// Tokenizes both sides and scores them.
pub fn score_text(hyp: &str, reference: &str, epsilon: f64) -> Result<BleuScore, BleuError> {
    sentence_bleu_with(&tokenize_chars(hyp), &tokenize_chars(reference), epsilon)
}

pub fn macro_average(scores: &[f64]) -> Result<f64, BleuError> {
    if scores.is_empty() {
        return Err(BleuError::EmptyScores);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub abs: f64,
    pub rel_pct: f64,
}

impl Gain {
    /// Relative gain rounded to one decimal place, as reported.
    pub fn rel_pct_rounded(&self) -> f64 {
        (self.rel_pct * 10.0).round() / 10.0
    }
}

impl std::fmt::Display for Gain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:+.2} / {:+.1}%", self.abs, self.rel_pct)
    }
}

pub fn gains(mean: f64, baseline_mean: f64) -> Result<Gain, BleuError> {
    if baseline_mean.is_nan() || baseline_mean <= 0.0 {
        return Err(BleuError::NonPositiveBaseline(baseline_mean));
    }
    let abs = mean - baseline_mean;
    Ok(Gain {
        abs,
        rel_pct: abs / baseline_mean * 100.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub size: usize,
    pub mean_bleu: f64,
    pub abs_gain: Option<f64>,
    pub rel_gain_pct: Option<f64>,
}

/// Builds one row per (size, mean); the row for size 0 is the baseline and
/// carries no gain cells. Relative gains are left empty when the baseline mean
/// is not positive.
pub fn gain_rows(means: &[(usize, f64)]) -> Result<Vec<GainRow>, BleuError> {
    let baseline = means
        .iter()
        .find(|(s, _)| *s == 0)
        .map(|(_, m)| *m)
        .ok_or(BleuError::MissingBaseline)?;
    let mut rows: Vec<GainRow> = means
        .iter()
        .map(|&(size, mean_bleu)| {
            if size == 0 {
                return GainRow {
                    size,
                    mean_bleu,
                    abs_gain: None,
                    rel_gain_pct: None,
                };
            }
            match gains(mean_bleu, baseline) {
                Ok(g) => GainRow {
                    size,
                    mean_bleu,
                    abs_gain: Some(g.abs),
                    rel_gain_pct: Some(g.rel_pct),
                },
                Err(_) => GainRow {
                    size,
                    mean_bleu,
                    abs_gain: Some(mean_bleu - baseline),
                    rel_gain_pct: None,
                },
            }
        })
        .collect();
    rows.sort_by_key(|r| r.size);
    Ok(rows)
}
