//! Owned HTML document tree with a deterministic serializer.
//!
//! Parsing follows the HTML5 tree-construction algorithm (via html5ever, through
//! `scraper`), so malformed markup is repaired rather than rejected. The parsed
//! tree is copied into plain owned values that the Minimal-HTML transforms can
//! rewrite freely.

use std::fmt::Write as _;

use ego_tree::NodeRef;
use scraper::node::Node as ScraperNode;
use scraper::Html;
use thiserror::Error;

/// Default input size cap for [`parse_html`].
pub const DEFAULT_MAX_BYTES: usize = 8 * 1024 * 1024;

const VOID_ELEMENTS: &[&str] = &[
    "area", "base", "basefont", "bgsound", "br", "col", "embed", "frame", "hr", "img", "input",
    "keygen", "link", "meta", "param", "source", "track", "wbr",
];

const RAW_TEXT_ELEMENTS: &[&str] = &[
    "script", "style", "xmp", "iframe", "noembed", "noframes", "plaintext", "noscript",
];

// Elements whose text never counts as visible content.
const HIDDEN_TEXT_ELEMENTS: &[&str] = &["script", "style", "noscript", "template"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomError {
    #[error("document of {size} bytes exceeds the {limit} byte cap")]
    Oversized { size: usize, limit: usize },
}

/// A node in the document tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomNode {
    Element(Element),
    Text(String),
    Comment(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    /// ASCII-lowercased tag name.
    pub tag: String,
    /// Attributes in source order; names are unique and lowercased.
    pub attrs: Vec<(String, String)>,
    pub children: Vec<DomNode>,
}

impl Element {
    pub fn new(tag: impl Into<String>) -> Self {
        Element {
            tag: tag.into().to_ascii_lowercase(),
            attrs: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    /// Sets an attribute, replacing an existing value in place.
    pub fn set_attr(&mut self, name: &str, value: impl Into<String>) {
        let name = name.to_ascii_lowercase();
        let value = value.into();
        match self.attrs.iter_mut().find(|(k, _)| *k == name) {
            Some(slot) => slot.1 = value,
            None => self.attrs.push((name, value)),
        }
    }

    pub fn child_elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|c| match c {
            DomNode::Element(e) => Some(e),
            _ => None,
        })
    }

    pub fn is_void(&self) -> bool {
        VOID_ELEMENTS.contains(&self.tag.as_str())
    }

    /// True if any direct child is a text node with non-whitespace content.
    pub fn has_direct_text(&self) -> bool {
        self.children
            .iter()
            .any(|c| matches!(c, DomNode::Text(t) if !t.trim().is_empty()))
    }

    /// Depth-first visit of this element and every descendant element.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Element)) {
        f(self);
        for child in self.child_elements() {
            child.walk(f);
        }
    }
}

/// A parsed document rooted at its `html` element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomDocument {
    pub root: Element,
    pub doctype: Option<String>,
    /// Byte length of the input this document was parsed from.
    pub source_length: usize,
    /// Character length of the decoded input.
    pub source_chars: usize,
}

impl DomDocument {
    pub fn body(&self) -> Option<&Element> {
        self.root.child_elements().find(|e| e.tag == "body")
    }
}

/// Parses HTML bytes with the default size cap.
pub fn parse_html(bytes: &[u8]) -> Result<DomDocument, DomError> {
    parse_html_with_limit(bytes, DEFAULT_MAX_BYTES)
}

/// Parses HTML bytes, rejecting inputs larger than `max_bytes`.
///
/// Invalid UTF-8 sequences are replaced with U+FFFD. Everything else is
/// accepted; broken markup is repaired by the standard tree builder.
pub fn parse_html_with_limit(bytes: &[u8], max_bytes: usize) -> Result<DomDocument, DomError> {
    if bytes.len() > max_bytes {
        return Err(DomError::Oversized {
            size: bytes.len(),
            limit: max_bytes,
        });
    }
    let text = String::from_utf8_lossy(bytes);
    let html = Html::parse_document(&text);

    let mut doctype = None;
    let mut root = None;
    for child in html.tree.root().children() {
        match child.value() {
            ScraperNode::Doctype(d) => doctype = Some(d.name().to_string()),
            ScraperNode::Element(_) if root.is_none() => {
                if let Some(DomNode::Element(e)) = convert(child) {
                    root = Some(e);
                }
            }
            _ => {}
        }
    }
    Ok(DomDocument {
        // The tree builder always synthesizes an html element.
        root: root.unwrap_or_else(|| Element::new("html")),
        doctype,
        source_length: bytes.len(),
        source_chars: text.chars().count(),
    })
}

fn convert(node: NodeRef<'_, ScraperNode>) -> Option<DomNode> {
    match node.value() {
        ScraperNode::Text(t) => Some(DomNode::Text(t.text.to_string())),
        ScraperNode::Comment(c) => Some(DomNode::Comment(c.comment.to_string())),
        ScraperNode::Element(el) => {
            let name = el.name.local.to_string().to_ascii_lowercase();
            let mut element = Element::new(name);
            for (qual, value) in el.attrs.iter() {
                let local = qual.local.to_ascii_lowercase().to_string();
                let name = match &qual.prefix {
                    Some(prefix) => format!("{}:{local}", prefix.to_ascii_lowercase()),
                    None => local,
                };
                if element.attr(&name).is_none() {
                    element.attrs.push((name, value.to_string()));
                }
            }
            element.children = convert_children(node);
            Some(DomNode::Element(element))
        }
        _ => None,
    }
}

fn convert_children(node: NodeRef<'_, ScraperNode>) -> Vec<DomNode> {
    let mut out = Vec::new();
    for child in node.children() {
        match child.value() {
            // Template contents live under a fragment node; inline them.
            ScraperNode::Fragment => out.extend(convert_children(child)),
            _ => {
                if let Some(n) = convert(child) {
                    push_merged(&mut out, n);
                }
            }
        }
    }
    out
}

fn push_merged(out: &mut Vec<DomNode>, node: DomNode) {
    if let (Some(DomNode::Text(prev)), DomNode::Text(next)) = (out.last_mut(), &node) {
        prev.push_str(next);
        return;
    }
    out.push(node);
}

/// Serializes a document to HTML text.
pub fn serialize(doc: &DomDocument) -> String {
    let mut out = String::with_capacity(doc.source_length.min(1 << 20));
    if let Some(name) = &doc.doctype {
        let _ = write!(out, "<!DOCTYPE {name}>");
    }
    write_element(&doc.root, &mut out);
    out
}

/// Serializes one element and its subtree.
pub fn serialize_element(element: &Element) -> String {
    let mut out = String::new();
    write_element(element, &mut out);
    out
}

fn write_element(el: &Element, out: &mut String) {
    out.push('<');
    out.push_str(&el.tag);
    for (name, value) in &el.attrs {
        out.push(' ');
        out.push_str(name);
        out.push_str("=\"");
        escape_attr(value, out);
        out.push('"');
    }
    out.push('>');
    if el.is_void() {
        return;
    }
    let raw = RAW_TEXT_ELEMENTS.contains(&el.tag.as_str());
    if matches!(el.tag.as_str(), "pre" | "textarea" | "listing") {
        // The parser drops one newline directly after these start tags.
        if let Some(DomNode::Text(t)) = el.children.first() {
            if t.starts_with('\n') {
                out.push('\n');
            }
        }
    }
    for child in &el.children {
        match child {
            DomNode::Element(e) => write_element(e, out),
            DomNode::Text(t) if raw => out.push_str(t),
            DomNode::Text(t) => escape_text(t, out),
            DomNode::Comment(c) => {
                out.push_str("<!--");
                out.push_str(c);
                out.push_str("-->");
            }
        }
    }
    out.push_str("</");
    out.push_str(&el.tag);
    out.push('>');
}

fn escape_text(text: &str, out: &mut String) {
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
}

fn escape_attr(text: &str, out: &mut String) {
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
}

/// Visible text of a subtree: descendant text outside script/style/comments,
/// whitespace runs collapsed to one space, ends trimmed.
pub fn visible_text(node: &DomNode) -> String {
    let mut raw = String::new();
    collect_text(node, &mut raw);
    collapse_whitespace(&raw)
}

/// [`visible_text`] for an element.
pub fn element_text(element: &Element) -> String {
    let mut raw = String::new();
    collect_element_text(element, &mut raw);
    collapse_whitespace(&raw)
}

fn collect_text(node: &DomNode, out: &mut String) {
    match node {
        DomNode::Text(t) => out.push_str(t),
        DomNode::Comment(_) => {}
        DomNode::Element(e) => collect_element_text(e, out),
    }
}

fn collect_element_text(el: &Element, out: &mut String) {
    if HIDDEN_TEXT_ELEMENTS.contains(&el.tag.as_str()) {
        return;
    }
    for child in &el.children {
        collect_text(child, out);
    }
}

/// Collapses runs of whitespace into single spaces and trims both ends.
pub fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
