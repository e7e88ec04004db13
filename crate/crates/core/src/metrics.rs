//! ROUGE-1, ROUGE-2 and ROUGE-L.
//!
//! Text is lowercased and split on runs of non-alphanumeric characters. No
//! stemming or stopword removal is applied.

use std::collections::HashMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate == 0 { 0.0 } else { overlap as f64 / candidate as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RougeScore {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, c)| (*c).min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(
        overlap,
        cand.values().sum(),
        refs.values().sum(),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

pub fn rouge(candidate: &str, reference: &str) -> RougeScore {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    RougeScore {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: Prf::from_counts(lcs_len(&c, &r), c.len(), r.len()),
    }
}

/// Component-wise mean of a set of scores; all zero when empty.
pub fn mean_score(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    let avg = |get: fn(&RougeScore) -> Prf| {
        let (p, r, f) = scores.iter().map(get).fold((0.0, 0.0, 0.0), |(p, r, f), s| {
            (p + s.precision, r + s.recall, f + s.f1)
        });
        Prf {
            precision: p / n,
            recall: r / n,
            f1: f / n,
        }
    };
    RougeScore {
        rouge1: avg(|s| s.rouge1),
        rouge2: avg(|s| s.rouge2),
        rouge_l: avg(|s| s.rouge_l),
    }
}
