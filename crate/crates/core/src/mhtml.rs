//! Minimal-HTML simplification.
//!
//! [`simplify`] runs a parsed page through a fixed sequence of gates and
//! rewrites: language gate, forbidden-element removal, pruning of subtrees
//! without enough text, div folding, attribute stripping, serialization and
//! finally the text-to-markup ratio gate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{self, DomDocument, DomNode, Element};
use crate::tokenizer::Tokenizer;

const SKELETON: &[&str] = &["html", "head", "body"];
/// Re-parse rounds allowed before output is declared unstable.
const SETTLE_PASSES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
}

/// Thresholds and element sets for the transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhtmlConfig {
    /// Minimum visible characters for an ordinary textual element.
    pub standard_threshold: usize,
    /// Minimum visible characters for list, table and span elements.
    pub compact_threshold: usize,
    /// Documents must have text/markup strictly above this ratio.
    pub min_text_ratio: f64,
    /// Primary language subtag the root `lang` attribute must carry. `None`
    /// disables the gate.
    pub required_lang: Option<String>,
    /// Accept documents whose root has no `lang` attribute at all.
    pub accept_missing_lang: bool,
    pub forbidden_tags: BTreeSet<String>,
    /// Class/id substrings marking headers, footers and copyright blocks.
    pub copyright_tokens: Vec<String>,
    pub compact_tags: BTreeSet<String>,
    pub max_doc_bytes: usize,
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for MhtmlConfig {
    fn default() -> Self {
        MhtmlConfig {
            standard_threshold: 128,
            compact_threshold: 64,
            min_text_ratio: 0.46,
            required_lang: Some("en".into()),
            accept_missing_lang: false,
            forbidden_tags: set(&[
                "header", "footer", "form", "iframe", "script", "style", "noscript",
            ]),
            copyright_tokens: vec!["copyright".into(), "footer".into(), "header".into()],
            compact_tags: set(&[
                "ul", "ol", "li", "dl", "dt", "dd", "table", "thead", "tbody", "tr", "td", "th",
                "span",
            ]),
            max_doc_bytes: dom::DEFAULT_MAX_BYTES,
        }
    }
}

impl MhtmlConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, message: &str| {
            Err(ConfigError::Invalid {
                field,
                message: message.to_string(),
            })
        };
        if !(self.min_text_ratio > 0.0 && self.min_text_ratio < 1.0) {
            return invalid("min_text_ratio", "must lie strictly between 0 and 1");
        }
        if self.standard_threshold == 0 {
            return invalid("standard_threshold", "must be positive");
        }
        if self.compact_threshold == 0 {
            return invalid("compact_threshold", "must be positive");
        }
        if self.compact_threshold > self.standard_threshold {
            return invalid("compact_threshold", "must not exceed standard_threshold");
        }
        if self.max_doc_bytes == 0 {
            return invalid("max_doc_bytes", "must be positive");
        }
        Ok(())
    }

    /// Loads a TOML config file; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: MhtmlConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid {
            field: "config",
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn threshold_for(&self, tag: &str) -> usize {
        if self.compact_tags.contains(tag) {
            self.compact_threshold
        } else {
            self.standard_threshold
        }
    }

    /// Whether `el` is a textual element that survives pruning on its own.
    pub fn qualifies(&self, el: &Element) -> bool {
        el.has_direct_text()
            && dom::element_text(el).chars().count() >= self.threshold_for(&el.tag)
    }
}

/// A simplified document with its size statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhtmlRecord {
    pub doc_id: String,
    pub url: Option<String>,
    pub mhtml: String,
    pub raw_chars: usize,
    pub mhtml_chars: usize,
    pub text_chars: usize,
    pub text_ratio: f64,
    pub lang: Option<String>,
}

impl MhtmlRecord {
    /// Fraction of characters removed relative to the raw page, floored at 0.
    pub fn reduction(&self) -> f64 {
        if self.raw_chars == 0 {
            return 0.0;
        }
        (1.0 - self.mhtml_chars as f64 / self.raw_chars as f64).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectCode {
    WrongLang,
    LowRatio,
    EmptyAfterPrune,
    Oversized,
    ParseError,
}

impl RejectCode {
    pub const ALL: [RejectCode; 5] = [
        RejectCode::WrongLang,
        RejectCode::LowRatio,
        RejectCode::EmptyAfterPrune,
        RejectCode::Oversized,
        RejectCode::ParseError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectCode::WrongLang => "wrong_lang",
            RejectCode::LowRatio => "low_ratio",
            RejectCode::EmptyAfterPrune => "empty_after_prune",
            RejectCode::Oversized => "oversized",
            RejectCode::ParseError => "parse_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}: {detail}", code.as_str())]
pub struct RejectReason {
    pub code: RejectCode,
    pub detail: String,
}

impl RejectReason {
    fn new(code: RejectCode, detail: impl Into<String>) -> Self {
        RejectReason {
            code,
            detail: detail.into(),
        }
    }
}

/// Parses raw bytes and simplifies them, tagging the record with its source.
pub fn simplify_bytes(
    doc_id: &str,
    url: Option<&str>,
    bytes: &[u8],
    cfg: &MhtmlConfig,
) -> Result<MhtmlRecord, RejectReason> {
    let doc = dom::parse_html_with_limit(bytes, cfg.max_doc_bytes)
        .map_err(|e| RejectReason::new(RejectCode::Oversized, e.to_string()))?;
    let mut record = simplify(&doc, cfg)?;
    record.doc_id = doc_id.to_string();
    record.url = url.map(str::to_string);
    Ok(record)
}

/// Runs the full transform. The returned record has an empty `doc_id`; see
/// [`simplify_bytes`] for the corpus-facing entry point.
pub fn simplify(doc: &DomDocument, cfg: &MhtmlConfig) -> Result<MhtmlRecord, RejectReason> {
    let lang = document_lang(&doc.root);
    check_lang(lang.as_deref(), cfg)?;

    let mut root = transform(doc.root.clone(), cfg)?;
    let mut mhtml = dom::serialize_element(&root);
    // Some trees (an <a> nested in an <a>, say) do not survive a re-parse of
    // their serialization. Re-run the transform on its own output until the
    // markup is stable so accepted output is a fixpoint.
    let mut settled = false;
    for _ in 0..SETTLE_PASSES {
        let reparsed = dom::parse_html(mhtml.as_bytes())
            .map_err(|e| RejectReason::new(RejectCode::ParseError, e.to_string()))?;
        let next = transform(reparsed.root, cfg)?;
        let next_mhtml = dom::serialize_element(&next);
        if next_mhtml == mhtml {
            settled = true;
            break;
        }
        root = next;
        mhtml = next_mhtml;
    }
    if !settled {
        return Err(RejectReason::new(
            RejectCode::ParseError,
            "output does not survive re-parsing",
        ));
    }
    let mhtml_chars = mhtml.chars().count();
    let text_chars = dom::element_text(&root).chars().count();
    let text_ratio = text_chars as f64 / mhtml_chars as f64;
    if text_ratio <= cfg.min_text_ratio {
        return Err(RejectReason::new(
            RejectCode::LowRatio,
            format!("text ratio {text_ratio:.4} <= {}", cfg.min_text_ratio),
        ));
    }
    Ok(MhtmlRecord {
        doc_id: String::new(),
        url: None,
        mhtml,
        raw_chars: doc.source_chars,
        mhtml_chars,
        text_chars,
        text_ratio,
        lang,
    })
}

fn transform(root: Element, cfg: &MhtmlConfig) -> Result<Element, RejectReason> {
    let root = remove_forbidden(root, cfg);
    let root = prune_nontextual(root, cfg).ok_or_else(|| {
        RejectReason::new(RejectCode::EmptyAfterPrune, "no qualifying textual element")
    })?;
    Ok(strip_attributes(fold_divs(root)))
}

fn document_lang(root: &Element) -> Option<String> {
    root.attr("lang")
        .or_else(|| root.attr("xml:lang"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
}

fn check_lang(lang: Option<&str>, cfg: &MhtmlConfig) -> Result<(), RejectReason> {
    let Some(required) = &cfg.required_lang else {
        return Ok(());
    };
    match lang {
        None if cfg.accept_missing_lang => Ok(()),
        None => Err(RejectReason::new(RejectCode::WrongLang, "missing lang attribute")),
        Some(lang) => {
            let primary = lang.split(['-', '_']).next().unwrap_or("");
            if primary.eq_ignore_ascii_case(required) {
                Ok(())
            } else {
                Err(RejectReason::new(
                    RejectCode::WrongLang,
                    format!("lang {lang:?} is not {required:?}"),
                ))
            }
        }
    }
}

/// Drops forbidden elements, comments, and elements whose class or id marks
/// them as header/footer/copyright blocks. The html/head/body skeleton is
/// never dropped.
pub fn remove_forbidden(mut root: Element, cfg: &MhtmlConfig) -> Element {
    let tokens: Vec<String> = cfg
        .copyright_tokens
        .iter()
        .map(|t| t.to_lowercase())
        .collect();
    strip_forbidden_children(&mut root, cfg, &tokens);
    root
}

fn strip_forbidden_children(el: &mut Element, cfg: &MhtmlConfig, tokens: &[String]) {
    el.children.retain(|child| match child {
        DomNode::Comment(_) => false,
        DomNode::Text(_) => true,
        DomNode::Element(e) => !is_forbidden(e, cfg, tokens),
    });
    for child in &mut el.children {
        if let DomNode::Element(e) = child {
            strip_forbidden_children(e, cfg, tokens);
        }
    }
}

fn is_forbidden(el: &Element, cfg: &MhtmlConfig, tokens: &[String]) -> bool {
    if cfg.forbidden_tags.contains(&el.tag) {
        return true;
    }
    if SKELETON.contains(&el.tag.as_str()) {
        return false;
    }
    ["class", "id"].iter().any(|name| {
        el.attr(name).is_some_and(|value| {
            let value = value.to_lowercase();
            value
                .split_whitespace()
                .any(|word| tokens.iter().any(|t| word.contains(t.as_str())))
        })
    })
}

/// Removes every subtree that contains no qualifying textual element.
///
/// A qualifying element is kept whole, including short inline children. Above
/// it, only ancestors on the path to some qualifying element survive, and
/// whitespace-only text between them is dropped. Returns `None` when nothing
/// qualifies.
pub fn prune_nontextual(mut root: Element, cfg: &MhtmlConfig) -> Option<Element> {
    if cfg.qualifies(&root) {
        return Some(root);
    }
    let mut found = false;
    let children = std::mem::take(&mut root.children);
    for child in children {
        match child {
            DomNode::Element(e) if root.tag == "html" && (e.tag == "head" || e.tag == "body") => {
                let tag = e.tag.clone();
                match prune_nontextual(e, cfg) {
                    Some(kept) => {
                        found = true;
                        root.children.push(DomNode::Element(kept));
                    }
                    None => root.children.push(DomNode::Element(Element::new(tag))),
                }
            }
            DomNode::Element(e) => {
                if let Some(kept) = prune_nontextual(e, cfg) {
                    found = true;
                    root.children.push(DomNode::Element(kept));
                }
            }
            DomNode::Text(t) if !t.trim().is_empty() => root.children.push(DomNode::Text(t)),
            _ => {}
        }
    }
    found.then_some(root)
}

/// Merges each div whose only element child is another div (ignoring
/// whitespace text) into a single div.
pub fn fold_divs(mut el: Element) -> Element {
    for child in &mut el.children {
        if let DomNode::Element(e) = child {
            *e = fold_divs(std::mem::replace(e, Element::new("div")));
        }
    }
    while el.tag == "div" {
        let Some(inner_idx) = sole_div_child(&el) else { break };
        let DomNode::Element(inner) = el.children.swap_remove(inner_idx) else {
            unreachable!()
        };
        el = merge_divs(el, inner);
    }
    el
}

fn sole_div_child(el: &Element) -> Option<usize> {
    let mut found = None;
    for (i, child) in el.children.iter().enumerate() {
        match child {
            DomNode::Element(e) if found.is_none() && e.tag == "div" => found = Some(i),
            DomNode::Text(t) if t.trim().is_empty() => {}
            DomNode::Comment(_) => {}
            _ => return None,
        }
    }
    found
}

fn merge_divs(outer: Element, inner: Element) -> Element {
    let mut merged = Element::new("div");
    let classes = match (outer.attr("class"), inner.attr("class")) {
        (None, None) => None,
        (a, b) => {
            let mut tokens: Vec<&str> = Vec::new();
            for t in a.unwrap_or("").split_whitespace().chain(b.unwrap_or("").split_whitespace()) {
                if !tokens.contains(&t) {
                    tokens.push(t);
                }
            }
            Some(tokens.join(" "))
        }
    };
    for (name, value) in outer.attrs.iter().chain(inner.attrs.iter()) {
        if merged.attr(name).is_some() {
            continue;
        }
        let value = if name == "class" {
            classes.clone().unwrap_or_default()
        } else {
            value.clone()
        };
        merged.attrs.push((name.clone(), value));
    }
    merged.children = inner.children;
    merged
}

/// Keeps only `class` and `id` attributes, in that order.
pub fn strip_attributes(mut el: Element) -> Element {
    let class = el.attr("class").map(str::to_string);
    let id = el.attr("id").map(str::to_string);
    el.attrs.clear();
    if let Some(c) = class {
        el.attrs.push(("class".into(), c));
    }
    if let Some(i) = id {
        el.attrs.push(("id".into(), i));
    }
    for child in &mut el.children {
        if let DomNode::Element(e) = child {
            *e = strip_attributes(std::mem::replace(e, Element::new("span")));
        }
    }
    el
}

/// A postcondition violation found by [`audit`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ForbiddenElement(String),
    Comment,
    ExtraAttribute { tag: String, name: String },
    FoldableDiv,
    NoQualifyingElement,
    RatioTooLow(f64),
}

/// Re-parses emitted MHTML and lists every broken output invariant.
pub fn audit(mhtml: &str, cfg: &MhtmlConfig) -> Vec<Violation> {
    let doc = match dom::parse_html(mhtml.as_bytes()) {
        Ok(doc) => doc,
        Err(_) => return vec![Violation::NoQualifyingElement],
    };
    let mut out = Vec::new();
    let mut qualifying = false;
    audit_element(&doc.root, cfg, &mut out, &mut qualifying);
    if !qualifying {
        out.push(Violation::NoQualifyingElement);
    }
    let ratio = dom::element_text(&doc.root).chars().count() as f64 / mhtml.chars().count() as f64;
    if ratio <= cfg.min_text_ratio {
        out.push(Violation::RatioTooLow(ratio));
    }
    out
}

fn audit_element(el: &Element, cfg: &MhtmlConfig, out: &mut Vec<Violation>, qualifying: &mut bool) {
    if cfg.forbidden_tags.contains(&el.tag) {
        out.push(Violation::ForbiddenElement(el.tag.clone()));
    }
    for (name, _) in &el.attrs {
        if name != "class" && name != "id" {
            out.push(Violation::ExtraAttribute {
                tag: el.tag.clone(),
                name: name.clone(),
            });
        }
    }
    if el.tag == "div" && sole_div_child(el).is_some() {
        out.push(Violation::FoldableDiv);
    }
    if cfg.qualifies(el) {
        *qualifying = true;
    }
    for child in &el.children {
        match child {
            DomNode::Comment(_) => out.push(Violation::Comment),
            DomNode::Element(e) => audit_element(e, cfg, out, qualifying),
            DomNode::Text(_) => {}
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no records to summarize")]
    Empty,
    #[error("token budget must be at least 1")]
    ZeroBudget,
}

/// Summary of a distribution of fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

impl Distribution {
    fn of(values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            (values[n / 2 - 1] + values[n / 2]) / 2.0
        };
        Distribution {
            min: values[0],
            max: values[n - 1],
            mean,
            median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub records: usize,
    pub mean_reduction: f64,
    pub median_reduction: f64,
    pub reduction: Distribution,
    pub text_ratio: Distribution,
    pub budget: usize,
    pub fit_count: usize,
    pub fit_fraction: f64,
}

/// Order-independent accumulator behind [`corpus_stats`]. Partial
/// accumulators built on different threads combine with [`StatsAccumulator::merge`].
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    reductions: Vec<f64>,
    ratios: Vec<f64>,
    fit_count: usize,
}

impl StatsAccumulator {
    pub fn add(&mut self, record: &MhtmlRecord, tokenizer: &Tokenizer, budget: usize) {
        self.reductions.push(record.reduction());
        self.ratios.push(record.text_ratio);
        if tokenizer.count(&record.mhtml) <= budget {
            self.fit_count += 1;
        }
    }

    pub fn merge(mut self, other: StatsAccumulator) -> Self {
        self.reductions.extend(other.reductions);
        self.ratios.extend(other.ratios);
        self.fit_count += other.fit_count;
        self
    }

    pub fn finish(mut self, budget: usize) -> Result<StatsReport, StatsError> {
        if self.reductions.is_empty() {
            return Err(StatsError::Empty);
        }
        let records = self.reductions.len();
        let reduction = Distribution::of(&mut self.reductions);
        let text_ratio = Distribution::of(&mut self.ratios);
        Ok(StatsReport {
            records,
            mean_reduction: reduction.mean,
            median_reduction: reduction.median,
            reduction,
            text_ratio,
            budget,
            fit_count: self.fit_count,
            fit_fraction: self.fit_count as f64 / records as f64,
        })
    }
}

/// Character-reduction, ratio and token-budget statistics over records.
pub fn corpus_stats<'a>(
    records: impl IntoIterator<Item = &'a MhtmlRecord>,
    tokenizer: &Tokenizer,
    budget: usize,
) -> Result<StatsReport, StatsError> {
    if budget == 0 {
        return Err(StatsError::ZeroBudget);
    }
    let mut acc = StatsAccumulator::default();
    for record in records {
        acc.add(record, tokenizer, budget);
    }
    acc.finish(budget)
}
