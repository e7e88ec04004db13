//! HTML prompt templates.
//!
//! Template files are UTF-8 text with four kinds of placeholder:
//!
//! ```text
//! {{field:NAME}}          task input
//! {{mask:SLOT}}           output slot, never hinted
//! {{mask:SLOT|hint=K}}    output slot with a fixed size hint K
//! {{mask:SLOT|hint=policy}}  output slot hinted by the caller (retry policy)
//! {{verbalizer}}          label slot of a classification template
//! ```
//!
//! `{{{{` stands for a literal `{{`. Label strings for classification
//! templates come from a separate JSON object (label -> string); they may
//! reference input fields with `{{field:NAME}}` too.
//!
//! Every mask must sit between two literal segments with visible text. The
//! line of literal text closest to the mask on each side (at most 64
//! characters, whitespace-normalized) becomes that side's anchor, and
//! [`extract`] uses the anchors to cut a model's fill out of a generated
//! document.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::dom::collapse_whitespace;
use crate::masking::render_sentinel;
use crate::tokenizer::MASK_TOKEN;

/// Longest anchor kept on either side of a mask.
pub const MAX_ANCHOR_CHARS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("mask slot {0:?} appears more than once")]
    DuplicateSlot(String),
    #[error("mask slot {slot:?} has no literal text on its {side} side")]
    EmptyAnchor { slot: String, side: &'static str },
    #[error("template has more than one verbalizer slot")]
    DuplicateVerbalizer,
    #[error("classification template cannot contain mask slots")]
    MixedSlots,
    #[error("invalid verbalizers: {0}")]
    Verbalizers(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no input given for field {0:?}")]
    MissingField(String),
    #[error("slot {slot:?} does not accept hint {hint}")]
    HintNotAllowed { slot: String, hint: usize },
    #[error("template has a verbalizer slot but no label was given")]
    MissingLabel,
    #[error("label {0:?} has no verbalizer")]
    UnknownLabel(String),
    #[error("template has no verbalizers")]
    NoVerbalizers,
}

/// Which side of a mask an anchor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSide {
    Prefix,
    Suffix,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("could not extract slot {slot:?}: {side:?} anchor {anchor:?} not found")]
pub struct ExtractionFailure {
    pub slot: String,
    pub side: AnchorSide,
    pub anchor: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HintMode {
    None,
    Fixed(usize),
    Policy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Field(String),
    Mask { slot: String, hint: HintMode },
    Verbalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub segments: Vec<Segment>,
    /// Label -> verbalizer text, in preference order for tie-breaking.
    pub verbalizers: Option<IndexMap<String, String>>,
    pub mask_token: String,
}

/// Anchors around one mask slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotAnchor {
    pub slot: String,
    pub prefix: String,
    pub suffix: String,
    /// Byte offset of the sentinel in the instantiated text.
    pub offset: usize,
    pub hint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstantiatedPrompt {
    pub text: String,
    /// One entry per mask slot, in document order.
    pub slots: Vec<SlotAnchor>,
}

impl InstantiatedPrompt {
    pub fn hints_used(&self) -> BTreeMap<String, Option<usize>> {
        self.slots
            .iter()
            .map(|s| (s.slot.clone(), s.hint))
            .collect()
    }
}

/// Loads and validates a template file. The template is named after the file stem.
pub fn load_template(path: &Path) -> Result<PromptTemplate, TemplateError> {
    let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_template(&name, &text)
}

/// Loads a verbalizer JSON object (label -> string).
pub fn load_verbalizers(path: &Path) -> Result<IndexMap<String, String>, TemplateError> {
    let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_verbalizers(&text)
}

pub fn parse_verbalizers(json: &str) -> Result<IndexMap<String, String>, TemplateError> {
    let map: IndexMap<String, String> =
        serde_json::from_str(json).map_err(|e| TemplateError::Verbalizers(e.to_string()))?;
    if map.is_empty() {
        return Err(TemplateError::Verbalizers("no labels".into()));
    }
    for (label, text) in &map {
        let segments = parse_segments(text)
            .map_err(|e| TemplateError::Verbalizers(format!("label {label:?}: {e}")))?;
        if segments
            .iter()
            .any(|s| !matches!(s, Segment::Literal(_) | Segment::Field(_)))
        {
            return Err(TemplateError::Verbalizers(format!(
                "label {label:?} may only contain text and fields"
            )));
        }
    }
    Ok(map)
}

/// Parses template text.
pub fn parse_template(name: &str, text: &str) -> Result<PromptTemplate, TemplateError> {
    let tpl = PromptTemplate {
        name: name.to_string(),
        segments: parse_segments(text)?,
        verbalizers: None,
        mask_token: MASK_TOKEN.to_string(),
    };
    tpl.validate()?;
    Ok(tpl)
}

fn line_col(text: &str, byte: usize) -> (usize, usize) {
    let before = &text[..byte];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().unwrap_or("").chars().count() + 1;
    (line, column)
}

fn parse_segments(text: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if rest.starts_with("{{{{") {
            literal.push_str("{{");
            i += 4;
            continue;
        }
        if !rest.starts_with("{{") {
            let ch = rest.chars().next().unwrap();
            literal.push(ch);
            i += ch.len_utf8();
            continue;
        }
        let syntax = |message: String| {
            let (line, column) = line_col(text, i);
            TemplateError::Syntax {
                line,
                column,
                message,
            }
        };
        let close = rest
            .find("}}")
            .ok_or_else(|| syntax("unclosed placeholder".into()))?;
        let inner = &rest[2..close];
        let segment = parse_placeholder(inner).map_err(syntax)?;
        if !literal.is_empty() {
            segments.push(Segment::Literal(std::mem::take(&mut literal)));
        }
        segments.push(segment);
        i += close + 2;
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn parse_placeholder(inner: &str) -> Result<Segment, String> {
    if inner == "verbalizer" {
        return Ok(Segment::Verbalizer);
    }
    if let Some(name) = inner.strip_prefix("field:") {
        if !valid_name(name) {
            return Err(format!("invalid field name {name:?}"));
        }
        return Ok(Segment::Field(name.to_string()));
    }
    if let Some(spec) = inner.strip_prefix("mask:") {
        let (slot, option) = match spec.split_once('|') {
            Some((slot, option)) => (slot, Some(option)),
            None => (spec, None),
        };
        if !valid_name(slot) {
            return Err(format!("invalid slot name {slot:?}"));
        }
        let hint = match option {
            None => HintMode::None,
            Some("hint=policy") => HintMode::Policy,
            Some(opt) => match opt.strip_prefix("hint=").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => HintMode::Fixed(k),
                _ => return Err(format!("invalid mask option {opt:?}")),
            },
        };
        return Ok(Segment::Mask {
            slot: slot.to_string(),
            hint,
        });
    }
    Err(format!("unknown placeholder {{{{{inner}}}}}"))
}

/// Anchor text taken from the literal on one side of a mask.
fn anchor_from(literal: &str, side: AnchorSide) -> String {
    let lines: Vec<&str> = literal.lines().collect();
    let pick: Box<dyn Iterator<Item = &&str>> = match side {
        AnchorSide::Prefix => Box::new(lines.iter().rev()),
        AnchorSide::Suffix => Box::new(lines.iter()),
    };
    let line = pick
        .map(|l| collapse_whitespace(l))
        .find(|l| !l.is_empty())
        .unwrap_or_default();
    let chars: Vec<char> = line.chars().collect();
    let kept: String = match side {
        AnchorSide::Prefix => chars[chars.len().saturating_sub(MAX_ANCHOR_CHARS)..]
            .iter()
            .collect(),
        AnchorSide::Suffix => chars[..chars.len().min(MAX_ANCHOR_CHARS)].iter().collect(),
    };
    kept.trim().to_string()
}

impl PromptTemplate {
    pub fn with_verbalizers(mut self, verbalizers: IndexMap<String, String>) -> Self {
        self.verbalizers = Some(verbalizers);
        self
    }

    pub fn with_mask_token(mut self, token: impl Into<String>) -> Self {
        self.mask_token = token.into();
        self
    }

    /// Checks slot uniqueness, anchors, and the classification/generation split.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let mut seen = HashSet::new();
        let mut verbalizers = 0;
        let mut masks = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Mask { slot, .. } => {
                    masks += 1;
                    if !seen.insert(slot.as_str()) {
                        return Err(TemplateError::DuplicateSlot(slot.clone()));
                    }
                    for (side, idx) in [(AnchorSide::Prefix, i.checked_sub(1)), (AnchorSide::Suffix, Some(i + 1))] {
                        let anchor = match idx.and_then(|j| self.segments.get(j)) {
                            Some(Segment::Literal(l)) => anchor_from(l, side),
                            _ => String::new(),
                        };
                        if anchor.is_empty() {
                            return Err(TemplateError::EmptyAnchor {
                                slot: slot.clone(),
                                side: if side == AnchorSide::Prefix { "prefix" } else { "suffix" },
                            });
                        }
                    }
                }
                Segment::Verbalizer => verbalizers += 1,
                _ => {}
            }
        }
        if verbalizers > 1 {
            return Err(TemplateError::DuplicateVerbalizer);
        }
        if verbalizers == 1 && masks > 0 {
            return Err(TemplateError::MixedSlots);
        }
        Ok(())
    }

    pub fn mask_slots(&self) -> impl Iterator<Item = (&str, HintMode)> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Mask { slot, hint } => Some((slot.as_str(), *hint)),
            _ => None,
        })
    }

    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Field(f) => Some(f.as_str()),
            _ => None,
        })
    }

    pub fn is_classification(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Verbalizer))
    }

    /// Labels in verbalizer order.
    pub fn labels(&self) -> Vec<&str> {
        self.verbalizers
            .as_ref()
            .map(|v| v.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Turns every `{{field:NAME}}` placeholder for `field` into a mask slot
    /// of the same name. Used to make a generation template out of an
    /// auto-prompted one.
    pub fn field_to_mask(&self, field: &str, hint: HintMode) -> Result<PromptTemplate, TemplateError> {
        let mut out = self.clone();
        for seg in &mut out.segments {
            if matches!(seg, Segment::Field(f) if f == field) {
                *seg = Segment::Mask {
                    slot: field.to_string(),
                    hint,
                };
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Renders the template back to the file format.
    pub fn to_template_string(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(&l.replace("{{", "{{{{")),
                Segment::Field(f) => {
                    out.push_str("{{field:");
                    out.push_str(f);
                    out.push_str("}}");
                }
                Segment::Mask { slot, hint } => {
                    out.push_str("{{mask:");
                    out.push_str(slot);
                    match hint {
                        HintMode::None => {}
                        HintMode::Fixed(k) => out.push_str(&format!("|hint={k}")),
                        HintMode::Policy => out.push_str("|hint=policy"),
                    }
                    out.push_str("}}");
                }
                Segment::Verbalizer => out.push_str("{{verbalizer}}"),
            }
        }
        out
    }
}

/// Fills fields and renders masks.
///
/// `hints` gives the hint for policy-hinted slots; fixed slots accept either
/// no entry or their own value, unhinted slots accept no hint at all.
pub fn instantiate(
    tpl: &PromptTemplate,
    inputs: &BTreeMap<String, String>,
    hints: &BTreeMap<String, Option<usize>>,
) -> Result<InstantiatedPrompt, PromptError> {
    render(tpl, inputs, hints, None)
}

/// Instantiates a classification template with the verbalizer for `label`.
pub fn instantiate_label(
    tpl: &PromptTemplate,
    inputs: &BTreeMap<String, String>,
    label: &str,
) -> Result<InstantiatedPrompt, PromptError> {
    render(tpl, inputs, &BTreeMap::new(), Some(label))
}

fn field_value<'a>(inputs: &'a BTreeMap<String, String>, name: &str) -> Result<&'a str, PromptError> {
    inputs
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| PromptError::MissingField(name.to_string()))
}

fn render(
    tpl: &PromptTemplate,
    inputs: &BTreeMap<String, String>,
    hints: &BTreeMap<String, Option<usize>>,
    label: Option<&str>,
) -> Result<InstantiatedPrompt, PromptError> {
    let mut text = String::new();
    let mut slots = Vec::new();
    for (i, seg) in tpl.segments.iter().enumerate() {
        match seg {
            Segment::Literal(l) => text.push_str(l),
            Segment::Field(f) => text.push_str(field_value(inputs, f)?),
            Segment::Mask { slot, hint } => {
                let given = hints.get(slot).copied().flatten();
                let hint = match (hint, given) {
                    (HintMode::None, None) => None,
                    (HintMode::None, Some(h)) => {
                        return Err(PromptError::HintNotAllowed {
                            slot: slot.clone(),
                            hint: h,
                        })
                    }
                    (HintMode::Fixed(k), None) => Some(*k),
                    (HintMode::Fixed(k), Some(h)) if h == *k => Some(h),
                    (HintMode::Fixed(_), Some(h)) => {
                        return Err(PromptError::HintNotAllowed {
                            slot: slot.clone(),
                            hint: h,
                        })
                    }
                    (HintMode::Policy, given) => given,
                };
                let literal = |j: Option<usize>, side| match j.and_then(|j| tpl.segments.get(j)) {
                    Some(Segment::Literal(l)) => anchor_from(l, side),
                    _ => String::new(),
                };
                slots.push(SlotAnchor {
                    slot: slot.clone(),
                    prefix: literal(i.checked_sub(1), AnchorSide::Prefix),
                    suffix: literal(Some(i + 1), AnchorSide::Suffix),
                    offset: text.len(),
                    hint,
                });
                text.push_str(&render_sentinel(&tpl.mask_token, hint));
            }
            Segment::Verbalizer => {
                let label = label.ok_or(PromptError::MissingLabel)?;
                let verbalizers = tpl.verbalizers.as_ref().ok_or(PromptError::NoVerbalizers)?;
                let verbalizer = verbalizers
                    .get(label)
                    .ok_or_else(|| PromptError::UnknownLabel(label.to_string()))?;
                // Verbalizers were validated at load time.
                for part in parse_segments(verbalizer).unwrap_or_default() {
                    match part {
                        Segment::Literal(l) => text.push_str(&l),
                        Segment::Field(f) => text.push_str(field_value(inputs, &f)?),
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(InstantiatedPrompt { text, slots })
}

/// Replaces whitespace runs with a single space, keeping a space at either end
/// if the input had whitespace there.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_ws = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !in_ws {
                out.push(' ');
            }
            in_ws = true;
        } else {
            out.push(ch);
            in_ws = false;
        }
    }
    out
}

/// Cuts each slot's fill out of `generated` using the slot anchors.
pub fn extract(
    prompt: &InstantiatedPrompt,
    generated: &str,
) -> Result<IndexMap<String, String>, ExtractionFailure> {
    let text = normalize_whitespace(generated);
    let mut cursor = 0;
    let mut out = IndexMap::new();
    for slot in &prompt.slots {
        let fail = |side, anchor: &str| ExtractionFailure {
            slot: slot.slot.clone(),
            side,
            anchor: anchor.to_string(),
        };
        let start = text[cursor..]
            .find(&slot.prefix)
            .map(|p| cursor + p + slot.prefix.len())
            .ok_or_else(|| fail(AnchorSide::Prefix, &slot.prefix))?;
        let end = text[start..]
            .find(&slot.suffix)
            .map(|p| start + p)
            .ok_or_else(|| fail(AnchorSide::Suffix, &slot.suffix))?;
        out.insert(slot.slot.clone(), text[start..end].trim().to_string());
        cursor = end;
    }
    Ok(out)
}
