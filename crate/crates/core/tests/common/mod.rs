#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use hyperprompt::mhtml::MhtmlConfig;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn templates() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates")
}

const TAGS: &[&str] = &[
    "div", "div", "div", "p", "p", "span", "ul", "li", "table", "tr", "td", "section", "article",
    "h1", "h2", "a", "b", "em", "header", "footer", "nav", "form", "script", "style", "noscript",
    "iframe", "blockquote", "pre", "aside", "main", "dl", "dd", "img", "br",
];
const ATTRS: &[&str] = &["class", "id", "style", "href", "data-x", "title", "onclick", "role"];
const CLASS_WORDS: &[&str] = &[
    "post", "entry-content", "site-footer", "copyright", "main", "header-bar", "card", "row",
];
const WORDS: &[&str] = &[
    "the", "council", "river", "approved", "a", "new", "budget", "on", "monday", "museum",
    "reopened", "after", "years", "of", "work", "&amp;", "caf\u{e9}", "\u{4e16}\u{754c}", "5",
];

fn fuzz_text<R: Rng>(rng: &mut R) -> String {
    let target = match rng.gen_range(0..4) {
        0 => rng.gen_range(1..40),
        1 => rng.gen_range(55..75),
        2 => rng.gen_range(120..140),
        _ => rng.gen_range(140..600),
    };
    let mut out = String::new();
    while out.chars().count() < target {
        if !out.is_empty() {
            out.push_str(if rng.gen_bool(0.05) { "\n  " } else { " " });
        }
        out.push_str(WORDS.choose(rng).unwrap());
    }
    out
}

fn fuzz_node<R: Rng>(rng: &mut R, depth: usize, out: &mut String) {
    let roll = rng.gen_range(0..100);
    if depth > 6 || roll < 25 {
        out.push_str(&fuzz_text(rng));
        return;
    }
    if roll < 28 {
        out.push_str("<!-- c -->");
        return;
    }
    let tag = *TAGS.choose(rng).unwrap();
    out.push('<');
    out.push_str(tag);
    for _ in 0..rng.gen_range(0..3) {
        let name = *ATTRS.choose(rng).unwrap();
        let value = if name == "class" || name == "id" {
            CLASS_WORDS.choose(rng).unwrap().to_string()
        } else {
            format!("v{}", rng.gen_range(0..100))
        };
        out.push_str(&format!(" {name}=\"{value}\""));
    }
    out.push('>');
    if tag == "img" || tag == "br" {
        return;
    }
    if tag == "script" || tag == "style" {
        out.push_str("var x = 1 < 2 && \"</p>\";");
    } else {
        for _ in 0..rng.gen_range(0..4) {
            fuzz_node(rng, depth + 1, out);
        }
    }
    // Leave some elements unclosed so the parser has to repair them.
    if rng.gen_bool(0.95) {
        out.push_str(&format!("</{tag}>"));
    }
}

/// A random, possibly malformed HTML document.
pub fn fuzz_html<R: Rng>(rng: &mut R) -> String {
    let lang = match rng.gen_range(0..10) {
        0 => "",
        1 => " lang=\"fr\"",
        2 => " lang=\"EN-gb\"",
        3 => " xml:lang=\"en\"",
        _ => " lang=\"en\"",
    };
    let mut body = String::new();
    for _ in 0..rng.gen_range(1..6) {
        fuzz_node(rng, 0, &mut body);
    }
    let head = if rng.gen_bool(0.5) {
        format!("<head><title>{}</title><style>p {{}}</style></head>", fuzz_text(rng))
    } else {
        String::new()
    };
    format!("<!DOCTYPE html><html{lang}>{head}<body class=\"b\" onload=\"x()\">{body}</body></html>")
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn direct_text(el: scraper::ElementRef) -> bool {
    el.children().any(|c| c.value().as_text().is_some_and(|t| !t.trim().is_empty()))
}

fn all_text(el: scraper::ElementRef) -> String {
    collapse(&el.text().collect::<String>())
}

/// Checks the Minimal-HTML properties of `mhtml` with scraper directly,
/// without going through the library's own DOM or audit code.
pub fn independent_violations(mhtml: &str, cfg: &MhtmlConfig) -> Vec<String> {
    let doc = scraper::Html::parse_document(mhtml);
    let mut out = Vec::new();
    let mut qualifying = false;
    for node in doc.tree.root().descendants() {
        if node.value().is_comment() {
            out.push("comment".into());
        }
        let Some(el) = scraper::ElementRef::wrap(node) else { continue };
        let tag = el.value().name();
        if cfg.forbidden_tags.contains(tag) {
            out.push(format!("forbidden <{tag}>"));
        }
        for (name, _) in el.value().attrs() {
            if name != "class" && name != "id" {
                out.push(format!("attribute {name} on <{tag}>"));
            }
        }
        let element_children: Vec<_> = el.children().filter_map(scraper::ElementRef::wrap).collect();
        if tag == "div"
            && !direct_text(el)
            && element_children.len() == 1
            && element_children[0].value().name() == "div"
        {
            out.push("foldable div chain".into());
        }
        let threshold = if cfg.compact_tags.contains(tag) {
            cfg.compact_threshold
        } else {
            cfg.standard_threshold
        };
        if direct_text(el) && all_text(el).chars().count() >= threshold {
            qualifying = true;
        }
    }
    if !qualifying {
        out.push("no qualifying element".into());
    }
    let text = all_text(doc.root_element()).chars().count() as f64;
    let ratio = text / mhtml.chars().count() as f64;
    if ratio <= cfg.min_text_ratio {
        out.push(format!("ratio {ratio}"));
    }
    out
}

/// Whitespace token count, computed without the library tokenizer: one token
/// per word (carrying its leading whitespace) plus one for trailing whitespace.
pub fn whitespace_token_count(text: &str) -> usize {
    let words = text.split_whitespace().count();
    let trailing = text.chars().last().is_some_and(char::is_whitespace);
    words + usize::from(trailing)
}

/// Splits text into whitespace tokens without the library tokenizer.
pub fn whitespace_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    let mut prev_ws = true;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if ws && !prev_ws && seen_word {
            out.push(&text[start..i]);
            start = i;
        }
        if !ws {
            seen_word = true;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub body: String,
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering each request from `handler`, which gets
/// the request and its 0-based arrival index.
pub struct TestServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Request>>>,
}

impl TestServer {
    pub fn start(handler: impl Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let handler = handler.clone();
                let log = log.clone();
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        TestServer { url, requests }
    }

    pub fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Request>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let mut length = 0;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let req = Request {
        method,
        path,
        body: String::from_utf8(body).unwrap(),
    };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        log.len() - 1
    };
    let (status, body) = handler(&req, index);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}
