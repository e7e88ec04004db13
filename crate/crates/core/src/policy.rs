//! Prompt execution against a [`Backend`]: the size-hint retry policy for
//! generation, perplexity-argmin classification, and auto-prompting.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::backend::{Backend, BackendError, InfillRequest};
use crate::dom::collapse_whitespace;
use crate::prompt::{
    extract, instantiate, instantiate_label, parse_template, HintMode, PromptError,
    PromptTemplate, Segment, TemplateError,
};
use crate::tokenizer::{Tokenizer, MASK_TOKEN};

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_MAX_RETRIES: usize = 5;
pub const DEFAULT_SAMPLE_CAP: usize = 50;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy: {0}")]
    Config(String),
    #[error("template has no policy-hinted mask slot")]
    NoPolicySlot,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("no extractable output after {} attempt(s)", attempts.len())]
    Exhausted { attempts: Vec<Attempt> },
    #[error("label {0:?} has no verbalizer")]
    UnknownLabel(String),
    #[error("auto-prompt failed: block {0:?} not found in backend output")]
    AutoPrompt(String),
    #[error("cannot estimate size hint from an empty target list")]
    NoTargets,
}

/// Half-up rounding, tolerant of float error just below a .5 boundary.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5 + 1e-9).floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeHintPolicy {
    pub s_bar: usize,
    pub epsilon: f64,
    pub max_retries: usize,
    pub sample_cap: usize,
}

impl SizeHintPolicy {
    pub fn new(s_bar: usize) -> Self {
        SizeHintPolicy {
            s_bar,
            epsilon: DEFAULT_EPSILON,
            max_retries: DEFAULT_MAX_RETRIES,
            sample_cap: DEFAULT_SAMPLE_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.s_bar < 1 {
            return Err(PolicyError::Config("s_bar must be at least 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(PolicyError::Config("epsilon must be a non-negative number".into()));
        }
        if self.sample_cap < 1 {
            return Err(PolicyError::Config("sample_cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Hints for round `i`: `[s_bar]` for round 0, otherwise the minus then
    /// plus candidate.
    pub fn round_hints(&self, i: usize) -> Vec<usize> {
        if i == 0 {
            return vec![self.s_bar];
        }
        let s = self.s_bar as f64;
        let step = i as f64 * self.epsilon * s;
        let minus = round_half_up(s - step).max(1) as usize;
        let plus = round_half_up(s + step).max(1) as usize;
        vec![minus, plus]
    }

    /// Every hint the policy can try, in order.
    pub fn hint_sequence(&self) -> Vec<usize> {
        (0..=self.max_retries).flat_map(|i| self.round_hints(i)).collect()
    }
}

/// Mean token length of the first `cap` targets, rounded half-up, at least 1.
pub fn estimate_s_bar<S: AsRef<str>>(
    targets: &[S],
    tokenizer: &Tokenizer,
    cap: usize,
) -> Result<usize, PolicyError> {
    let used = &targets[..targets.len().min(cap)];
    if used.is_empty() {
        return Err(PolicyError::NoTargets);
    }
    let total: usize = used.iter().map(|t| tokenizer.count(t.as_ref())).sum();
    let mean = total as f64 / used.len() as f64;
    Ok(round_half_up(mean).max(1) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeSource {
    Initial,
    Retry(usize),
    AutoTemplateFallback,
}

impl fmt::Display for OutcomeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeSource::Initial => f.write_str("initial"),
            OutcomeSource::Retry(i) => write!(f, "retry({i})"),
            OutcomeSource::AutoTemplateFallback => f.write_str("auto_template_fallback"),
        }
    }
}

impl Serialize for OutcomeSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attempt {
    /// Retry round; the fallback attempt is `max_retries + 1`.
    pub round: usize,
    pub hint: Option<usize>,
    pub extracted: bool,
    pub perplexity: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyOutcome {
    pub slot_outputs: IndexMap<String, String>,
    pub attempts: Vec<Attempt>,
    pub source: OutcomeSource,
}

impl PolicyOutcome {
    pub fn hints_tried(&self) -> Vec<Option<usize>> {
        self.attempts.iter().map(|a| a.hint).collect()
    }

    pub fn selected(&self) -> Option<&Attempt> {
        self.attempts.iter().find(|a| a.selected)
    }
}

struct Candidate {
    attempt: usize,
    perplexity: f64,
    outputs: IndexMap<String, String>,
}

/// Instantiates with `hint` on every policy slot, infills, and records one
/// attempt per returned output. Returns the extractable candidates.
fn try_hint(
    tpl: &PromptTemplate,
    inputs: &BTreeMap<String, String>,
    round: usize,
    hint: usize,
    backend: &dyn Backend,
    attempts: &mut Vec<Attempt>,
) -> Result<Vec<Candidate>, PolicyError> {
    let hints: BTreeMap<String, Option<usize>> = tpl
        .mask_slots()
        .filter(|(_, mode)| *mode == HintMode::Policy)
        .map(|(slot, _)| (slot.to_string(), Some(hint)))
        .collect();
    let prompt = instantiate(tpl, inputs, &hints)?;
    let recorded_hint = if hints.is_empty() { None } else { Some(hint) };
    let outputs = backend.infill(&InfillRequest::new(prompt.text.clone()))?;
    let mut found = Vec::new();
    for out in outputs {
        let extracted = extract(&prompt, &out.text).ok();
        let perplexity = out.perplexity();
        if let Some(outputs) = extracted.clone() {
            found.push(Candidate {
                attempt: attempts.len(),
                perplexity,
                outputs,
            });
        }
        attempts.push(Attempt {
            round,
            hint: recorded_hint,
            extracted: extracted.is_some(),
            perplexity: Some(perplexity),
            selected: false,
        });
    }
    Ok(found)
}

/// Runs the size-hint retry policy.
///
/// Round 0 uses `s_bar`; round `i` tries the minus and plus candidates and
/// keeps the extractable output with the lowest perplexity (earlier hint on a
/// tie). If every round fails and `fallback` is given, it is tried once with
/// `s_bar` on its policy slots.
pub fn run_generation(
    tpl: &PromptTemplate,
    inputs: &BTreeMap<String, String>,
    policy: &SizeHintPolicy,
    backend: &dyn Backend,
    fallback: Option<&PromptTemplate>,
) -> Result<PolicyOutcome, PolicyError> {
    policy.validate()?;
    if !tpl.mask_slots().any(|(_, mode)| mode == HintMode::Policy) {
        return Err(PolicyError::NoPolicySlot);
    }
    let mut attempts = Vec::new();
    for round in 0..=policy.max_retries {
        let mut candidates = Vec::new();
        for hint in policy.round_hints(round) {
            candidates.extend(try_hint(tpl, inputs, round, hint, backend, &mut attempts)?);
        }
        let best = candidates.into_iter().reduce(|best, c| {
            if c.perplexity < best.perplexity {
                c
            } else {
                best
            }
        });
        if let Some(best) = best {
            attempts[best.attempt].selected = true;
            let source = if round == 0 {
                OutcomeSource::Initial
            } else {
                OutcomeSource::Retry(round)
            };
            return Ok(PolicyOutcome {
                slot_outputs: best.outputs,
                attempts,
                source,
            });
        }
    }
    if let Some(fallback) = fallback {
        let round = policy.max_retries + 1;
        let found = try_hint(fallback, inputs, round, policy.s_bar, backend, &mut attempts)?;
        if let Some(best) = found.into_iter().next() {
            attempts[best.attempt].selected = true;
            return Ok(PolicyOutcome {
                slot_outputs: best.outputs,
                attempts,
                source: OutcomeSource::AutoTemplateFallback,
            });
        }
    }
    Err(PolicyError::Exhausted { attempts })
}

/// Makes a fallback generation template from an auto-prompted one by turning
/// each field named like one of `tpl`'s policy slots into a policy slot.
pub fn fallback_from_auto(
    tpl: &PromptTemplate,
    auto: &PromptTemplate,
) -> Result<PromptTemplate, PolicyError> {
    let mut out = auto.clone();
    for (slot, mode) in tpl.mask_slots() {
        if mode == HintMode::Policy {
            out = out.field_to_mask(slot, HintMode::Policy)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: String,
    /// Perplexity per label, in verbalizer order.
    pub perplexities: IndexMap<String, f64>,
}

/// Scores the template once per label and returns the lowest-perplexity label.
/// Ties go to the label listed first in the verbalizers. An empty `labels`
/// means every label the template has.
pub fn classify(
    tpl: &PromptTemplate,
    inputs: &BTreeMap<String, String>,
    labels: &[String],
    backend: &dyn Backend,
) -> Result<Classification, PolicyError> {
    let known = tpl.labels();
    for label in labels {
        if !known.contains(&label.as_str()) {
            return Err(PolicyError::UnknownLabel(label.clone()));
        }
    }
    let order: Vec<&str> = known
        .into_iter()
        .filter(|l| labels.is_empty() || labels.iter().any(|x| x == l))
        .collect();
    if order.is_empty() {
        return Err(PromptError::NoVerbalizers.into());
    }
    let mut perplexities = IndexMap::new();
    let mut best: Option<(&str, f64)> = None;
    for label in order {
        let prompt = instantiate_label(tpl, inputs, label)?;
        let ppl = backend.score(&prompt.text)?.perplexity();
        perplexities.insert(label.to_string(), ppl);
        if best.map_or(true, |(_, b)| ppl < b) {
            best = Some((label, ppl));
        }
    }
    Ok(Classification {
        label: best.map(|(l, _)| l.to_string()).unwrap_or_default(),
        perplexities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoPromptRequest {
    /// (field name, example text) in document order.
    pub blocks: Vec<(String, String)>,
    pub examples_used: usize,
}

impl AutoPromptRequest {
    /// The masked document sent to the backend: each block wrapped in
    /// sentinels, one block per line.
    pub fn masked_document(&self) -> String {
        self.blocks
            .iter()
            .map(|(_, text)| format!("{MASK_TOKEN} {text} {MASK_TOKEN}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Whitespace-normalized copy of `text` plus, for each byte of the copy, its
/// source offset (with one trailing entry for the end).
fn normalize_with_map(text: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(text.len() + 1);
    let mut in_ws = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if !in_ws {
                out.push(' ');
                map.push(i);
            }
            in_ws = true;
        } else {
            out.push(ch);
            map.extend(std::iter::repeat(i).take(ch.len_utf8()));
            in_ws = false;
        }
    }
    map.push(text.len());
    (out, map)
}

/// Asks the backend to mark up the example blocks and turns its answer into a
/// template: each block becomes a field placeholder, everything else literal.
pub fn auto_prompt(req: &AutoPromptRequest, backend: &dyn Backend) -> Result<PromptTemplate, PolicyError> {
    if req.blocks.is_empty() {
        return Err(PolicyError::Config("auto-prompt needs at least one block".into()));
    }
    for (name, text) in &req.blocks {
        if text.trim().is_empty() {
            return Err(PolicyError::Config(format!("block {name:?} is empty")));
        }
    }
    let outputs = backend.infill(&InfillRequest::new(req.masked_document()))?;
    let doc = outputs
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("infill returned no outputs".into()))?
        .text;
    let (norm, map) = normalize_with_map(&doc);
    let mut segments = Vec::new();
    let mut cursor = 0;
    for (name, text) in &req.blocks {
        let needle = collapse_whitespace(text);
        let rel = norm[cursor..]
            .find(&needle)
            .ok_or_else(|| PolicyError::AutoPrompt(name.clone()))?;
        let start = cursor + rel;
        let end = start + needle.len();
        let literal = &doc[map[cursor]..map[start]];
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal.to_string()));
        }
        segments.push(Segment::Field(name.clone()));
        cursor = end;
    }
    let tail = &doc[map[cursor]..];
    if !tail.is_empty() {
        segments.push(Segment::Literal(tail.to_string()));
    }
    let tpl = PromptTemplate {
        name: "auto".into(),
        segments,
        verbalizers: None,
        mask_token: MASK_TOKEN.into(),
    };
    Ok(parse_template(&tpl.name, &tpl.to_template_string())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{EchoBackend, ScoreRule, ScriptBackend};
    use crate::prompt::{normalize_whitespace, parse_verbalizers};

    fn inputs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn hint_sequence_for_s_bar_10() {
        let p = SizeHintPolicy::new(10);
        assert_eq!(p.hint_sequence(), vec![10, 9, 11, 8, 12, 7, 13, 6, 14, 5, 15]);
    }

    #[test]
    fn hints_clamp_and_round_half_up() {
        let p = SizeHintPolicy { s_bar: 1, epsilon: 0.5, max_retries: 3, sample_cap: 50 };
        // 1 - 0.5 = 0.5 rounds up to 1; 1 - 1.0 = 0 clamps to 1.
        assert_eq!(p.hint_sequence(), vec![1, 1, 2, 1, 2, 1, 3]);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.4999999999999996), 3);
        assert_eq!(round_half_up(2.49), 2);
    }

    #[test]
    fn estimate_s_bar_cases() {
        let tok = Tokenizer::whitespace();
        let a = "w ".repeat(8);
        let b = "w ".repeat(12);
        assert_eq!(estimate_s_bar(&[a.trim(), b.trim()], &tok, 50).unwrap(), 10);
        assert_eq!(estimate_s_bar(&["w"], &tok, 50).unwrap(), 1);
        assert!(matches!(estimate_s_bar::<&str>(&[], &tok, 50), Err(PolicyError::NoTargets)));
        // Cap drops the long target.
        assert_eq!(estimate_s_bar(&["a b", "a b c d e f"], &tok, 1).unwrap(), 2);
    }

    fn title_tpl() -> PromptTemplate {
        parse_template("t", "<title>{{mask:title|hint=policy}}</title><body>{{field:body}}</body>").unwrap()
    }

    #[test]
    fn initial_success() {
        let b = EchoBackend::new("A Title");
        let out = run_generation(&title_tpl(), &inputs(&[("body", "x")]), &SizeHintPolicy::new(10), &b, None).unwrap();
        assert_eq!(out.source, OutcomeSource::Initial);
        assert_eq!(out.attempts.len(), 1);
        assert_eq!(out.slot_outputs["title"], "A Title");
    }

    #[test]
    fn transport_failure_is_not_extraction_failure() {
        let b = ScriptBackend::new().push_error(BackendError::Transport { attempts: 3, message: "down".into() });
        let err = run_generation(&title_tpl(), &inputs(&[("body", "x")]), &SizeHintPolicy::new(10), &b, None).unwrap_err();
        assert!(matches!(err, PolicyError::Backend(_)));
    }

    #[test]
    fn classify_argmin_and_ties() {
        let tpl = parse_template("c", "<q>{{field:q}}</q><a>{{verbalizer}}</a>")
            .unwrap()
            .with_verbalizers(parse_verbalizers(r#"{"yes":"Yes","no":"No"}"#).unwrap());
        let b = ScriptBackend::new()
            .score_rule(ScoreRule::Contains("<a>Yes".into()), 3.2, 1)
            .score_rule(ScoreRule::Contains("<a>No".into()), 2.1, 1);
        let r = classify(&tpl, &inputs(&[("q", "?")]), &[], &b).unwrap();
        assert_eq!(r.label, "no");

        let tie = ScriptBackend::new().score_rule(ScoreRule::Contains("<q>".into()), 1.0, 1);
        assert_eq!(classify(&tpl, &inputs(&[("q", "?")]), &[], &tie).unwrap().label, "yes");
        assert!(matches!(
            classify(&tpl, &inputs(&[("q", "?")]), &["maybe".into()], &tie),
            Err(PolicyError::UnknownLabel(_))
        ));
    }

    #[test]
    fn auto_prompt_echo_case() {
        let req = AutoPromptRequest {
            blocks: vec![("summary".into(), "short one".into()), ("article".into(), "long  text here".into())],
            examples_used: 1,
        };
        assert_eq!(req.masked_document(), "<mask> short one <mask>\n<mask> long  text here <mask>");
        let tpl = auto_prompt(&req, &EchoBackend::new("")).unwrap();
        assert_eq!(tpl.fields().collect::<Vec<_>>(), vec!["summary", "article"]);
        for seg in &tpl.segments {
            if let Segment::Literal(l) = seg {
                assert!(l.trim().is_empty(), "{l:?}");
            }
        }
    }

    #[test]
    fn auto_prompt_missing_block() {
        let req = AutoPromptRequest {
            blocks: vec![("a".into(), "alpha".into()), ("b".into(), "beta".into())],
            examples_used: 1,
        };
        let b = ScriptBackend::new().push_text("<p>alpha</p>", 0.0, 1);
        assert!(matches!(auto_prompt(&req, &b), Err(PolicyError::AutoPrompt(f)) if f == "b"));
    }

    #[test]
    fn auto_prompt_keeps_layout() {
        let req = AutoPromptRequest {
            blocks: vec![("s".into(), "a  b".into())],
            examples_used: 1,
        };
        let doc = "<h1>\n  a\n b\n</h1>\n";
        let b = ScriptBackend::new().push_text(doc, 0.0, 1);
        let tpl = auto_prompt(&req, &b).unwrap();
        assert_eq!(tpl.to_template_string(), "<h1>\n  {{field:s}}\n</h1>\n");
        let text = instantiate(&tpl, &inputs(&[("s", "a  b")]), &BTreeMap::new()).unwrap().text;
        assert_eq!(normalize_whitespace(&text), normalize_whitespace(doc));
    }
}
