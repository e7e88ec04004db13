//! Denoising examples with span masks and noisy size hints.
//!
//! Spans are drawn with zero-truncated Poisson lengths until the configured
//! share of tokens is masked. Each span collapses to one sentinel; most
//! sentinels carry a size hint rendered as decimal digits glued to the
//! sentinel (`<mask>12`). The hint is the true span length perturbed by a
//! normal draw with standard deviation `m * epsilon`, floored and clamped to 1.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError};
use crate::tokenizer::{Tokenizer, MASK_TOKEN};

#[derive(Debug, Error)]
pub enum MaskingError {
    #[error("invalid masking parameter {field}: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("document has {0} tokens; at least 2 are needed")]
    TooShort(usize),
    #[error("document already contains the sentinel {0:?}")]
    SentinelInText(String),
    #[error("source does not match span metadata: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Poisson rate for span lengths.
    pub lambda: f64,
    /// Target fraction of tokens to mask.
    pub mask_rate: f64,
    /// Probability that a span gets a size hint.
    pub hint_prob: f64,
    /// Relative standard deviation of the hint noise.
    pub epsilon: f64,
    pub seed: u64,
    pub mask_token: String,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            lambda: 3.5,
            mask_rate: 0.30,
            hint_prob: 0.80,
            epsilon: 0.10,
            seed: 0,
            mask_token: MASK_TOKEN.to_string(),
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskingError> {
        let bad = |field, message: &str| {
            Err(MaskingError::Config {
                field,
                message: message.into(),
            })
        };
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be > 0");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad("mask_rate", "must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.hint_prob) {
            return bad("hint_prob", "must lie in [0, 1]");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be >= 0");
        }
        if self.mask_token.is_empty() {
            return bad("mask_token", "must not be empty");
        }
        Ok(())
    }
}

/// One masked span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMask {
    /// Index of the first masked token.
    pub start: usize,
    /// Number of masked tokens.
    pub m: usize,
    pub hint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub doc_id: String,
    pub source: String,
    pub target: String,
    pub spans: Vec<SpanMask>,
    pub seed: u64,
}

/// Draws a span length from Poisson(`lambda`) conditioned on being at least 1.
pub fn sample_span_length<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> usize {
    let poisson = Poisson::new(lambda).expect("lambda > 0");
    loop {
        let k = poisson.sample(rng) as usize;
        if k >= 1 {
            return k;
        }
    }
}

/// Maps a raw normal draw to a hint: `max(1, floor(g))`.
pub fn hint_from_draw(g: f64) -> usize {
    let floored = g.floor();
    if floored < 1.0 || floored.is_nan() {
        1
    } else {
        floored as usize
    }
}

/// Draws a noisy size hint for a span of true length `m`.
pub fn sample_hint<R: Rng + ?Sized>(rng: &mut R, m: usize, epsilon: f64) -> usize {
    let sd = m as f64 * epsilon;
    if sd == 0.0 {
        return m.max(1);
    }
    let normal = Normal::new(m as f64, sd).expect("finite standard deviation");
    hint_from_draw(normal.sample(rng))
}

/// Seed for one document, derived from the run seed and the document id so
/// that results do not depend on processing order.
pub fn document_seed(seed: u64, doc_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Renders a sentinel with its optional hint.
pub fn render_sentinel(mask_token: &str, hint: Option<usize>) -> String {
    match hint {
        Some(n) => format!("{mask_token}{n}"),
        None => mask_token.to_string(),
    }
}

/// Masks one document with an RNG seeded from `cfg.seed` and `doc_id`.
pub fn mask_with_doc_seed(
    doc_id: &str,
    text: &str,
    tokenizer: &Tokenizer,
    cfg: &MaskingConfig,
) -> Result<MaskedExample, MaskingError> {
    let seed = document_seed(cfg.seed, doc_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = mask_document(text, tokenizer, cfg, &mut rng)?;
    ex.doc_id = doc_id.to_string();
    ex.seed = seed;
    Ok(ex)
}

/// Masks `text`. The returned example has an empty `doc_id` and a zero seed;
/// [`mask_with_doc_seed`] fills both.
pub fn mask_document<R: Rng + ?Sized>(
    text: &str,
    tokenizer: &Tokenizer,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedExample, MaskingError> {
    cfg.validate()?;
    if text.contains(cfg.mask_token.as_str()) {
        return Err(MaskingError::SentinelInText(cfg.mask_token.clone()));
    }
    let tokens = tokenizer.token_spans(text);
    let n = tokens.len();
    if n < 2 {
        return Err(MaskingError::TooShort(n));
    }

    let budget = ((cfg.mask_rate * n as f64).ceil() as usize).max(1);
    let mut free = FreeRuns::new(n);
    let mut spans = Vec::new();
    let mut covered = 0;
    while covered < budget {
        let mut m = sample_span_length(rng, cfg.lambda).min(budget - covered);
        let start = loop {
            let count = free.legal_starts(m);
            if count > 0 {
                break Some(free.nth_start(m, rng.gen_range(0..count)));
            }
            m -= 1;
            if m == 0 {
                break None;
            }
        };
        let Some(start) = start else { break };
        free.occupy(start, m);
        covered += m;
        let hint = rng
            .gen_bool(cfg.hint_prob)
            .then(|| sample_hint(rng, m, cfg.epsilon));
        spans.push(SpanMask { start, m, hint });
    }
    spans.sort_by_key(|s| s.start);

    let source = render_source(text, &tokens, &spans, &cfg.mask_token);
    Ok(MaskedExample {
        doc_id: String::new(),
        source,
        target: text.to_string(),
        spans,
        seed: 0,
    })
}

fn render_source(text: &str, tokens: &[Range<usize>], spans: &[SpanMask], mask: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut next = 0;
    for span in spans {
        out.push_str(&text[tokens[next].start..tokens[span.start].start]);
        out.push_str(mask);
        if let Some(h) = span.hint {
            let _ = write!(out, "{h}");
        }
        next = span.start + span.m;
    }
    if next < tokens.len() {
        out.push_str(&text[tokens[next].start..]);
    }
    out
}

/// Unmasked token runs, as half-open index ranges in ascending order.
struct FreeRuns {
    n: usize,
    runs: Vec<Range<usize>>,
}

impl FreeRuns {
    fn new(n: usize) -> Self {
        FreeRuns { n, runs: vec![0..n] }
    }

    // A span may touch the document edges but must leave one free token
    // between itself and any neighbouring span.
    fn start_range(&self, run: &Range<usize>, m: usize) -> Range<usize> {
        let lo = if run.start == 0 { 0 } else { run.start + 1 };
        let end = if run.end == self.n { run.end } else { run.end.saturating_sub(1) };
        if end < lo + m {
            return lo..lo;
        }
        lo..end - m + 1
    }

    fn legal_starts(&self, m: usize) -> usize {
        self.runs.iter().map(|r| self.start_range(r, m).len()).sum()
    }

    fn nth_start(&self, m: usize, mut k: usize) -> usize {
        for run in &self.runs {
            let range = self.start_range(run, m);
            if k < range.len() {
                return range.start + k;
            }
            k -= range.len();
        }
        unreachable!("k below legal_starts")
    }

    fn occupy(&mut self, start: usize, m: usize) {
        let idx = self
            .runs
            .iter()
            .position(|r| r.start <= start && start + m <= r.end)
            .expect("span inside a free run");
        let run = self.runs.remove(idx);
        let mut insert = Vec::new();
        if run.start < start {
            insert.push(run.start..start);
        }
        if start + m < run.end {
            insert.push(start + m..run.end);
        }
        for (offset, r) in insert.into_iter().enumerate() {
            self.runs.insert(idx + offset, r);
        }
    }
}

/// Replaces each sentinel in `source` with the matching entry of `fills`.
///
/// Sentinels are located left to right; a span with a hint must be followed
/// by exactly its hint digits.
pub fn reconstruct(
    source: &str,
    spans: &[SpanMask],
    fills: &[&str],
    mask_token: &str,
) -> Result<String, MaskingError> {
    if spans.len() != fills.len() {
        return Err(MaskingError::Mismatch(format!(
            "{} spans but {} fills",
            spans.len(),
            fills.len()
        )));
    }
    let mut out = String::with_capacity(source.len());
    let mut cursor = 0;
    for (i, (span, fill)) in spans.iter().zip(fills).enumerate() {
        let pos = source[cursor..]
            .find(mask_token)
            .map(|p| p + cursor)
            .ok_or_else(|| MaskingError::Mismatch(format!("sentinel {i} not found")))?;
        let mut end = pos + mask_token.len();
        if let Some(h) = span.hint {
            let digits = h.to_string();
            if !source[end..].starts_with(&digits) {
                return Err(MaskingError::Mismatch(format!("sentinel {i} lacks hint {h}")));
            }
            end += digits.len();
        }
        out.push_str(&source[cursor..pos]);
        out.push_str(fill);
        cursor = end;
    }
    if source[cursor..].contains(mask_token) {
        return Err(MaskingError::Mismatch("more sentinels than spans".into()));
    }
    out.push_str(&source[cursor..]);
    Ok(out)
}

impl MaskedExample {
    /// Original text of each span, recovered from the target.
    pub fn span_texts<'a>(&'a self, tokenizer: &Tokenizer) -> Vec<&'a str> {
        let tokens = tokenizer.token_spans(&self.target);
        self.spans
            .iter()
            .map(|s| &self.target[tokens[s.start].start..tokens[s.start + s.m - 1].end])
            .collect()
    }

    /// Number of masked tokens.
    pub fn masked_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.m).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EmitSummary {
    pub written: usize,
    pub skipped: usize,
    pub masks: usize,
    pub hinted: usize,
}

/// Masks every record of a shard directory and writes one JSONL row per
/// example to `out`. Nothing is written when there are no records.
pub fn emit_training_set(
    shard_dir: &Path,
    tokenizer: &Tokenizer,
    cfg: &MaskingConfig,
    workers: usize,
    out: &Path,
) -> Result<EmitSummary, MaskingError> {
    cfg.validate()?;
    let mut records = corpus::read_shards(shard_dir)?;
    records.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    if records.is_empty() {
        return Ok(EmitSummary::default());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<MaskedExample, MaskingError>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| mask_with_doc_seed(&r.doc_id, &r.mhtml, tokenizer, cfg))
            .collect()
    });

    let mut summary = EmitSummary::default();
    let mut examples = Vec::with_capacity(results.len());
    for result in results {
        match result {
            Ok(ex) => {
                summary.masks += ex.spans.len();
                summary.hinted += ex.spans.iter().filter(|s| s.hint.is_some()).count();
                examples.push(ex);
            }
            Err(MaskingError::TooShort(_) | MaskingError::SentinelInText(_)) => summary.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    summary.written = examples.len();
    if examples.is_empty() {
        return Ok(summary);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CorpusError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    corpus::write_jsonl(out, &examples)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn span_lengths_are_reproducible_and_positive() {
        let a: Vec<usize> = (0..50).map({
            let mut r = rng(3);
            move |_| sample_span_length(&mut r, 3.5)
        }).collect();
        let b: Vec<usize> = (0..50).map({
            let mut r = rng(3);
            move |_| sample_span_length(&mut r, 3.5)
        }).collect();
        assert_eq!(a, b);
        let mut r = rng(11);
        assert!((0..1_000_000).all(|_| sample_span_length(&mut r, 3.5) >= 1));
    }

    #[test]
    fn hint_edge_cases() {
        let mut r = rng(1);
        assert_eq!(sample_hint(&mut r, 10, 0.0), 10);
        assert_eq!(hint_from_draw(0.3), 1);
        assert_eq!(hint_from_draw(-4.2), 1);
        assert_eq!(hint_from_draw(12.9), 12);
    }

    #[test]
    fn no_hints_when_probability_zero() {
        let cfg = MaskingConfig {
            hint_prob: 0.0,
            ..Default::default()
        };
        let t = Tokenizer::whitespace();
        let text = "one two three four five six seven eight nine ten eleven twelve";
        let ex = mask_document(text, &t, &cfg, &mut rng(5)).unwrap();
        assert!(!ex.spans.is_empty());
        assert!(ex.spans.iter().all(|s| s.hint.is_none()));
        let after: Vec<&str> = ex.source.split(MASK_TOKEN).skip(1).collect();
        assert!(after.iter().all(|s| !s.starts_with(|c: char| c.is_ascii_digit())));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let t = Tokenizer::whitespace();
        let cfg = MaskingConfig::default();
        let text = "<p>the quick brown fox jumps over the lazy dog again and again</p>";
        let a = mask_with_doc_seed("d1", text, &t, &cfg).unwrap();
        let b = mask_with_doc_seed("d1", text, &t, &cfg).unwrap();
        assert_eq!(a, b);
        let c = mask_with_doc_seed("d2", text, &t, &cfg).unwrap();
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn hinted_sentinel_rendering() {
        let t = Tokenizer::whitespace();
        let cfg = MaskingConfig {
            hint_prob: 1.0,
            epsilon: 0.0,
            mask_rate: 0.2,
            ..Default::default()
        };
        let text = "a b c d e f g h i j";
        let ex = mask_document(text, &t, &cfg, &mut rng(2)).unwrap();
        for s in &ex.spans {
            assert_eq!(s.hint, Some(s.m));
            assert!(ex.source.contains(&format!("<mask>{}", s.m)));
        }
        let fills = ex.span_texts(&t);
        assert_eq!(reconstruct(&ex.source, &ex.spans, &fills, MASK_TOKEN).unwrap(), text);
    }

    #[test]
    fn rejects_short_and_sentinel_text() {
        let t = Tokenizer::whitespace();
        let cfg = MaskingConfig::default();
        assert!(matches!(
            mask_document("single", &t, &cfg, &mut rng(0)),
            Err(MaskingError::TooShort(1))
        ));
        assert!(matches!(
            mask_document("a <mask> b", &t, &cfg, &mut rng(0)),
            Err(MaskingError::SentinelInText(_))
        ));
        let bad = MaskingConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            mask_document("a b", &t, &bad, &mut rng(0)),
            Err(MaskingError::Config { field: "lambda", .. })
        ));
    }

    #[test]
    fn two_token_document() {
        let t = Tokenizer::whitespace();
        let ex = mask_document("a b", &t, &MaskingConfig::default(), &mut rng(9)).unwrap();
        assert_eq!(ex.masked_tokens(), 1);
    }

    #[test]
    fn free_runs_respect_separation() {
        let mut f = FreeRuns::new(10);
        assert_eq!(f.legal_starts(3), 8);
        f.occupy(4, 2);
        // Runs 0..4 and 6..10; starts for m=1: 0,1,2 and 7,8,9.
        assert_eq!(f.legal_starts(1), 6);
        assert_eq!(f.nth_start(1, 3), 7);
        assert_eq!(f.legal_starts(3), 2);
        assert_eq!(f.legal_starts(4), 0);
    }

    #[test]
    fn reconstruct_detects_mismatch() {
        let spans = [SpanMask { start: 0, m: 1, hint: Some(3) }];
        assert!(reconstruct("<mask>4 x", &spans, &["a"], MASK_TOKEN).is_err());
        assert!(reconstruct("x", &spans, &["a"], MASK_TOKEN).is_err());
        assert_eq!(reconstruct("<mask>35 x", &spans, &["a"], MASK_TOKEN).unwrap(), "a5 x");
    }
}
