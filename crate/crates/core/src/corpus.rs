//! Corpus ingestion, the parallel simplification run, and JSONL shard I/O.
//!
//! A source is either a directory of `.html`/`.htm` files or a single WARC file
//! (optionally gzip-compressed). Accepted records are written as JSON Lines
//! shards, sorted by `doc_id`, next to a `manifest.json` sidecar.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::mhtml::{self, MhtmlConfig, MhtmlRecord, RejectCode, RejectReason};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SHARD_SIZE: usize = 10_000;

const CHUNK_DOCS: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}:{line}: malformed record: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("workers must be at least 1")]
    NoWorkers,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One raw page as read from the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDoc {
    pub doc_id: String,
    pub url: Option<String>,
    pub bytes: Vec<u8>,
}

/// Stream of raw documents. Corrupt inputs are skipped and counted.
pub struct DocStream {
    inner: StreamKind,
    skipped: usize,
}

enum StreamKind {
    Files {
        root: PathBuf,
        paths: std::vec::IntoIter<(String, PathBuf)>,
    },
    Warc {
        name: String,
        reader: WarcReader<Box<dyn BufRead + Send>>,
    },
}

impl DocStream {
    /// Inputs skipped so far because they could not be read or parsed.
    pub fn skipped(&self) -> usize {
        self.skipped
            + match &self.inner {
                StreamKind::Warc { reader, .. } => reader.corrupt,
                StreamKind::Files { .. } => 0,
            }
    }
}

impl Iterator for DocStream {
    type Item = RawDoc;

    fn next(&mut self) -> Option<RawDoc> {
        match &mut self.inner {
            StreamKind::Files { root, paths } => {
                for (doc_id, path) in paths.by_ref() {
                    match fs::read(&path) {
                        Ok(bytes) => {
                            return Some(RawDoc {
                                doc_id,
                                url: None,
                                bytes,
                            })
                        }
                        Err(e) => {
                            log::warn!("skipping {} under {}: {e}", path.display(), root.display());
                            self.skipped += 1;
                        }
                    }
                }
                None
            }
            StreamKind::Warc { name, reader } => loop {
                let record = reader.next_record()?;
                if let Some(doc) = record.into_html_doc(name) {
                    return Some(doc);
                }
            },
        }
    }
}

/// Opens a source: a directory of HTML files or a WARC file.
pub fn ingest(source: &Path) -> Result<DocStream, CorpusError> {
    let meta = fs::metadata(source).map_err(io_err(source))?;
    if meta.is_dir() {
        let mut paths = Vec::new();
        let mut skipped = 0;
        for entry in WalkDir::new(source).follow_links(true) {
            let entry = match entry {
                Ok(e) => e,
                Err(e) if e.depth() == 0 => {
                    return Err(CorpusError::Io {
                        path: source.to_path_buf(),
                        source: e.into(),
                    })
                }
                Err(e) => {
                    log::warn!("skipping unreadable entry: {e}");
                    skipped += 1;
                    continue;
                }
            };
            if !entry.file_type().is_file() || !is_html_path(entry.path()) {
                continue;
            }
            let rel = entry.path().strip_prefix(source).unwrap_or(entry.path());
            let doc_id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            paths.push((doc_id, entry.path().to_path_buf()));
        }
        paths.sort();
        Ok(DocStream {
            inner: StreamKind::Files {
                root: source.to_path_buf(),
                paths: paths.into_iter(),
            },
            skipped,
        })
    } else {
        let file = File::open(source).map_err(io_err(source))?;
        let gz = source.extension().is_some_and(|e| e == "gz");
        let reader: Box<dyn BufRead + Send> = if gz {
            Box::new(BufReader::new(MultiGzDecoder::new(file)))
        } else {
            Box::new(BufReader::new(file))
        };
        let name = source
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(DocStream {
            inner: StreamKind::Warc {
                name,
                reader: WarcReader::new(reader),
            },
            skipped: 0,
        })
    }
}

fn is_html_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("html") || e.eq_ignore_ascii_case("htm"))
}

/// A record read from a WARC stream.
#[derive(Debug, Clone)]
pub struct WarcRecord {
    /// Byte offset of the record header in the (decompressed) stream.
    pub offset: u64,
    pub headers: Vec<(String, String)>,
    pub block: Vec<u8>,
}

impl WarcRecord {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn into_html_doc(self, source_name: &str) -> Option<RawDoc> {
        if !self.header("WARC-Type")?.eq_ignore_ascii_case("response") {
            return None;
        }
        let (content_type, body) = split_http_response(&self.block)?;
        let ct = content_type.to_ascii_lowercase();
        if !(ct.contains("text/html") || ct.contains("application/xhtml+xml")) {
            return None;
        }
        Some(RawDoc {
            doc_id: format!("{source_name}#{:012}", self.offset),
            url: self.header("WARC-Target-URI").map(str::to_string),
            bytes: body.to_vec(),
        })
    }
}

/// Returns the Content-Type header and body of an HTTP response block.
fn split_http_response(block: &[u8]) -> Option<(String, &[u8])> {
    let (head_end, sep) = find(block, b"\r\n\r\n")
        .map(|i| (i, 4))
        .or_else(|| find(block, b"\n\n").map(|i| (i, 2)))?;
    let head = String::from_utf8_lossy(&block[..head_end]);
    let mut lines = head.lines();
    if !lines.next()?.starts_with("HTTP/") {
        return None;
    }
    let content_type = lines
        .filter_map(|l| l.split_once(':'))
        .find(|(k, _)| k.trim().eq_ignore_ascii_case("content-type"))
        .map(|(_, v)| v.trim().to_string())?;
    Some((content_type, &block[head_end + sep..]))
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Minimal WARC/1.x record reader.
pub struct WarcReader<R> {
    reader: R,
    pos: u64,
    /// Records skipped because their header or block was malformed.
    pub corrupt: usize,
    skipping: bool,
}

impl<R: BufRead> WarcReader<R> {
    pub fn new(reader: R) -> Self {
        WarcReader {
            reader,
            pos: 0,
            corrupt: 0,
            skipping: false,
        }
    }

    fn read_line(&mut self) -> Option<Vec<u8>> {
        let mut line = Vec::new();
        match self.reader.read_until(b'\n', &mut line) {
            Ok(0) | Err(_) => None,
            Ok(n) => {
                self.pos += n as u64;
                Some(line)
            }
        }
    }

    /// Next well-formed record, or `None` at end of stream.
    pub fn next_record(&mut self) -> Option<WarcRecord> {
        loop {
            // Find the version line, skipping blank separators and junk. A run
            // of junk lines counts as one corrupt record.
            let offset = loop {
                let start = self.pos;
                let line = self.read_line()?;
                if line.starts_with(b"WARC/") {
                    self.skipping = false;
                    break start;
                }
                if !line.iter().all(|b| b.is_ascii_whitespace()) && !self.skipping {
                    self.corrupt += 1;
                    self.skipping = true;
                }
            };

            let mut headers = Vec::new();
            let mut ok = true;
            loop {
                let Some(line) = self.read_line() else {
                    self.corrupt += 1;
                    return None;
                };
                let text = String::from_utf8_lossy(&line);
                let text = text.trim_end_matches(['\r', '\n']);
                if text.is_empty() {
                    break;
                }
                match text.split_once(':') {
                    Some((k, v)) => headers.push((k.trim().to_string(), v.trim().to_string())),
                    None => ok = false,
                }
            }
            let length = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("Content-Length"))
                .and_then(|(_, v)| v.parse::<u64>().ok());
            let Some(length) = length.filter(|_| ok) else {
                self.corrupt += 1;
                self.skipping = true;
                continue;
            };
            let mut block = Vec::new();
            match (&mut self.reader).take(length).read_to_end(&mut block) {
                Ok(n) if n as u64 == length => self.pos += length,
                _ => {
                    self.corrupt += 1;
                    return None;
                }
            }
            return Some(WarcRecord {
                offset,
                headers,
                block,
            });
        }
    }
}

/// Sidecar manifest describing a shard directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub shards: Vec<Shard>,
    pub rejects: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub record_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub ingested: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<RejectCode, usize>,
    pub skipped_corrupt: usize,
    pub shards: Vec<Shard>,
}

impl RunSummary {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub workers: usize,
    pub shard_size: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

/// Simplifies every document in `source` and writes sharded output to `out`.
///
/// Output bytes depend only on the input and `cfg`, not on the worker count.
pub fn run_pipeline(
    source: &Path,
    cfg: &MhtmlConfig,
    opts: &PipelineOptions,
    out: &Path,
) -> Result<RunSummary, CorpusError> {
    if opts.workers == 0 {
        return Err(CorpusError::NoWorkers);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .expect("thread pool");

    let mut stream = ingest(source)?;
    let mut records = Vec::new();
    let mut rejected: BTreeMap<RejectCode, usize> = BTreeMap::new();
    let mut ingested = 0;
    loop {
        let chunk: Vec<RawDoc> = stream.by_ref().take(CHUNK_DOCS).collect();
        if chunk.is_empty() {
            break;
        }
        ingested += chunk.len();
        let results: Vec<Result<MhtmlRecord, RejectReason>> =
            pool.install(|| chunk.par_iter().map(|doc| process(doc, cfg)).collect());
        for result in results {
            match result {
                Ok(record) => records.push(record),
                Err(reason) => *rejected.entry(reason.code).or_default() += 1,
            }
        }
    }
    let skipped_corrupt = stream.skipped();
    records.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let shards = write_shards(out, &records, opts.shard_size.max(1), &rejected)?;
    Ok(RunSummary {
        ingested: ingested + skipped_corrupt,
        accepted: records.len(),
        rejected,
        skipped_corrupt,
        shards,
    })
}

fn process(doc: &RawDoc, cfg: &MhtmlConfig) -> Result<MhtmlRecord, RejectReason> {
    std::panic::catch_unwind(|| mhtml::simplify_bytes(&doc.doc_id, doc.url.as_deref(), &doc.bytes, cfg))
        .unwrap_or_else(|_| {
            Err(RejectReason {
                code: RejectCode::ParseError,
                detail: "parser panicked".into(),
            })
        })
}

fn shard_name(index: usize) -> String {
    format!("shard-{index:05}.jsonl")
}

fn write_shards(
    out: &Path,
    records: &[MhtmlRecord],
    shard_size: usize,
    rejected: &BTreeMap<RejectCode, usize>,
) -> Result<Vec<Shard>, CorpusError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    remove_previous_output(out)?;

    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        let mut shards = Vec::new();
        for (i, chunk) in records.chunks(shard_size).enumerate() {
            let name = shard_name(i);
            let path = out.join(&name);
            written.push(path.clone());
            write_jsonl(&path, chunk)?;
            shards.push(Shard {
                path: name,
                record_count: chunk.len(),
            });
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            shards: shards.clone(),
            rejects: RejectCode::ALL
                .iter()
                .map(|c| (c.as_str().to_string(), rejected.get(c).copied().unwrap_or(0)))
                .collect(),
        };
        let path = out.join(MANIFEST_FILE);
        written.push(path.clone());
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(shards)
    })();
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}

fn remove_previous_output(out: &Path) -> Result<(), CorpusError> {
    for entry in fs::read_dir(out).map_err(io_err(out))? {
        let entry = entry.map_err(io_err(out))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE || (name.starts_with("shard-") && name.ends_with(".jsonl")) {
            fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    Ok(())
}

/// Writes serializable rows as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(CorpusError::Manifest {
            path,
            message: format!("unsupported version {}", manifest.version),
        });
    }
    Ok(manifest)
}

/// Reads every record of a shard file.
pub fn read_shard(path: &Path) -> Result<Vec<MhtmlRecord>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads all records listed in a shard directory's manifest, in order.
pub fn read_shards(dir: &Path) -> Result<Vec<MhtmlRecord>, CorpusError> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::new();
    for shard in &manifest.shards {
        out.extend(read_shard(&dir.join(&shard.path))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warc_record(kind: &str, uri: &str, block: &[u8]) -> Vec<u8> {
        let mut rec = format!(
            "WARC/1.0\r\nWARC-Type: {kind}\r\nWARC-Target-URI: {uri}\r\nContent-Length: {}\r\n\r\n",
            block.len()
        )
        .into_bytes();
        rec.extend_from_slice(block);
        rec.extend_from_slice(b"\r\n\r\n");
        rec
    }

    fn http(ct: &str, body: &str) -> Vec<u8> {
        format!("HTTP/1.1 200 OK\r\nContent-Type: {ct}\r\n\r\n{body}").into_bytes()
    }

    #[test]
    fn warc_filters_by_content_type() {
        let mut data = Vec::new();
        data.extend(warc_record("warcinfo", "", b"software: x\r\n"));
        data.extend(warc_record("response", "http://a/", &http("text/html; charset=utf-8", "<p>a</p>")));
        data.extend(warc_record("response", "http://img/", &http("image/png", "\u{89}PNG")));
        data.extend(warc_record("request", "http://a/", b"GET / HTTP/1.1\r\n\r\n"));
        data.extend(warc_record("response", "http://b/", &http("text/html", "<p>b</p>")));
        let mut reader = WarcReader::new(&data[..]);
        let docs: Vec<RawDoc> = std::iter::from_fn(|| reader.next_record())
            .filter_map(|r| r.into_html_doc("x.warc"))
            .collect();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].url.as_deref(), Some("http://a/"));
        assert_eq!(docs[1].bytes, b"<p>b</p>");
        assert!(docs[0].doc_id < docs[1].doc_id);
        assert_eq!(reader.corrupt, 0);
    }

    #[test]
    fn warc_skips_corrupt_records() {
        let mut data = Vec::new();
        data.extend(warc_record("response", "http://a/", &http("text/html", "<p>a</p>")));
        data.extend(b"WARC/1.0\r\nWARC-Type: response\r\nContent-Length: nope\r\n\r\ngarbage\r\n\r\n");
        data.extend(b"junk line\r\nmore junk\r\n");
        data.extend(warc_record("response", "http://b/", &http("text/html", "<p>b</p>")));
        let mut reader = WarcReader::new(&data[..]);
        let records: Vec<WarcRecord> = std::iter::from_fn(|| reader.next_record()).collect();
        assert_eq!(records.len(), 2);
        assert_eq!(reader.corrupt, 1);
    }

    #[test]
    fn warc_truncated_block_is_counted() {
        let mut data = warc_record("response", "http://a/", &http("text/html", "<p>a</p>"));
        data.extend(b"WARC/1.0\r\nWARC-Type: response\r\nContent-Length: 500\r\n\r\nshort");
        let mut reader = WarcReader::new(&data[..]);
        assert!(reader.next_record().is_some());
        assert!(reader.next_record().is_none());
        assert_eq!(reader.corrupt, 1);
    }
}
