//! Text similarity metrics between a candidate and a single reference.
//!
//! All three share one tokenizer: lowercase, then split into maximal runs of
//! alphanumeric characters (whitespace and punctuation are separators).

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Precision assigned to an n-gram order with no matches, divided by the
/// number of candidate n-grams of that order. It bounds the score of a
/// candidate that shares no word with the reference.
pub const BLEU_SMOOTHING_FLOOR: f64 = 0.1;
pub const BLEU_MAX_ORDER: usize = 4;

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn tokens_pair(candidate: &str, reference: &str) -> Result<(Vec<String>, Vec<String>)> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok((c, r))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions up to order 4, the
/// brevity penalty exp(1 - r/c) when the candidate is shorter, and floor
/// smoothing for orders with no match. Orders longer than the candidate are
/// left out (effective order), so short identical texts still score 1.
pub fn bleu(candidate: &str, reference: &str) -> Result<f64> {
    let (c, r) = tokens_pair(candidate, reference)?;
    let order = BLEU_MAX_ORDER.min(c.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let cand = ngram_counts(&c, n);
        let refc = ngram_counts(&r, n);
        let total = c.len() + 1 - n;
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            BLEU_SMOOTHING_FLOOR / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    Ok(bp * (log_sum / order as f64).exp())
}

/// Exact-match unigram alignment: each candidate token, left to right, takes
/// an unused reference position holding the same word, preferring the one
/// right after the previous match so that chunks stay contiguous.
fn align(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    let mut prev: Option<usize> = None;
    for (i, tok) in c.iter().enumerate() {
        let next = prev.map(|p| p + 1).filter(|&j| j < r.len() && !used[j] && &r[j] == tok);
        let j = next.or_else(|| (0..r.len()).find(|&j| !used[j] && &r[j] == tok));
        if let Some(j) = j {
            used[j] = true;
            pairs.push((i, j));
            prev = Some(j);
        } else {
            prev = None;
        }
    }
    pairs
}

/// Simplified METEOR: exact unigram matches only, Fmean = 10PR / (R + 9P),
/// fragmentation penalty 0.5 * ((chunks - 1) / (m - 1))^3 (zero for a single
/// match), score = Fmean * (1 - penalty). A perfect match scores 1.
pub fn meteor(candidate: &str, reference: &str) -> Result<f64> {
    let (c, r) = tokens_pair(candidate, reference)?;
    let pairs = align(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return Ok(0.0);
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = if m == 1 {
        0.0
    } else {
        0.5 * ((chunks - 1) as f64 / (m - 1) as f64).powi(3)
    };
    Ok(fmean * (1.0 - penalty))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence of tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let (c, r) = tokens_pair(candidate, reference)?;
    let l = lcs_len(&c, &r);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    Ok(2.0 * p * rec / (p + rec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Stop, NOW!  go-left"), vec!["stop", "now", "go", "left"]);
    }

    #[test]
    fn identical_texts_score_one() {
        for t in ["stop", "turn left", "slow down before the crossing, then stop"] {
            assert!((bleu(t, t).unwrap() - 1.0).abs() < 1e-12);
            assert!((meteor(t, t).unwrap() - 1.0).abs() < 1e-12);
            assert!((rouge_l(t, t).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_texts() {
        assert!(bleu("go straight", "turn left").unwrap() <= BLEU_SMOOTHING_FLOOR);
        assert_eq!(meteor("go straight", "turn left").unwrap(), 0.0);
        assert_eq!(rouge_l("go straight", "turn left").unwrap(), 0.0);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(bleu("", "stop"), Err(Error::EmptyText)));
        assert!(matches!(meteor("stop", " ,. "), Err(Error::EmptyText)));
        assert!(matches!(rouge_l("", ""), Err(Error::EmptyText)));
    }

    #[test]
    fn rouge_ignores_case_and_trailing_space() {
        let a = rouge_l("Turn Left  ", "turn left now").unwrap();
        let b = rouge_l("turn left", "turn left now").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn meteor_counts_chunks() {
        // two matches in swapped order: two chunks, penalty 0.5
        let s = meteor("left turn", "turn left").unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }
}
