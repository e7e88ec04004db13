//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
//! Diagnostics go to stderr; data goes to files or stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::backend::{backend_from_spec, Backend, BackendError, BACKEND_URL_ENV};
use crate::corpus::{self, PipelineOptions, DEFAULT_SHARD_SIZE};
use crate::masking::{self, MaskingConfig, MaskingError};
use crate::metrics::{mean_score, rouge};
use crate::mhtml::{corpus_stats, ConfigError, MhtmlConfig};
use crate::policy::{self, AutoPromptRequest, PolicyError, SizeHintPolicy};
use crate::prompt::{load_template, load_verbalizers, HintMode, PromptTemplate};
use crate::tokenizer::{Tokenizer, MASK_TOKEN};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => m,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Precondition(m) => CliError::Usage(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Backend(b) => b.into(),
            PolicyError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hyperprompt", version, about = "Minimal-HTML corpora, size-hinted masking and HTML prompting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simplify an HTML directory or WARC file into sharded Minimal-HTML.
    Extract(ExtractArgs),
    /// Report reduction, text ratio and token-budget statistics for shards.
    Stats(StatsArgs),
    /// Write size-hinted masked training examples from shards.
    Mask(MaskArgs),
    /// Run a generation template with the size-hint retry policy.
    PromptRun(PromptRunArgs),
    /// Classify inputs by lowest template perplexity.
    Classify(ClassifyArgs),
    /// Derive a template by asking the backend to mark up example blocks.
    Autoprompt(AutopromptArgs),
    /// Score line-aligned predictions against references with ROUGE.
    EvalRouge(EvalRougeArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory of .html files, or a .warc / .warc.gz file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Minimum characters for textual elements [default: 128].
    #[arg(long)]
    pub min_text: Option<usize>,
    /// Minimum characters for list, table and span elements [default: 64].
    #[arg(long)]
    pub min_text_compact: Option<usize>,
    /// Text/markup ratio a document must exceed [default: 0.46].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Required language subtag, or "none" to disable the gate [default: en].
    #[arg(long)]
    pub lang: Option<String>,
    /// Accept documents without a lang attribute.
    #[arg(long)]
    pub accept_missing_lang: bool,
    /// Worker threads [default: CPU count].
    #[arg(long)]
    pub workers: Option<usize>,
    /// TOML config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Accepted for symmetry with `mask`; extraction is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
    pub shard_size: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Shard directory written by `extract`.
    #[arg(long)]
    pub input: PathBuf,
    /// "whitespace" or a directory holding vocab.json and merges.txt.
    #[arg(long, default_value = "whitespace")]
    pub tokenizer: String,
    #[arg(long, default_value_t = 1024)]
    pub budget: usize,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL file.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 3.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.3)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = 0.8)]
    pub hint_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = MASK_TOKEN)]
    pub mask_token: String,
    #[arg(long, default_value = "whitespace")]
    pub tokenizer: String,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BackendArg {
    /// Backend URL, `echo` or `echo:TEXT` [default: $HTLM_BACKEND_URL].
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct PromptRunArgs {
    #[arg(long)]
    pub template: PathBuf,
    /// JSONL rows of field -> string; an optional "id" names the row.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub backend: BackendArg,
    /// Size hint; estimated from the rows' gold slot values when omitted.
    #[arg(long)]
    pub s_bar: Option<usize>,
    #[arg(long, default_value_t = policy::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = policy::DEFAULT_MAX_RETRIES)]
    pub max_retries: usize,
    /// Rows used to estimate --s-bar.
    #[arg(long, default_value_t = policy::DEFAULT_SAMPLE_CAP)]
    pub sample_cap: usize,
    /// Auto-prompted template tried once after every retry fails.
    #[arg(long)]
    pub auto_template: Option<PathBuf>,
    #[arg(long, default_value = "whitespace")]
    pub tokenizer: String,
    /// Output JSONL file [default: stdout].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub template: PathBuf,
    /// JSON object label -> verbalizer.
    #[arg(long)]
    pub verbalizers: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub backend: BackendArg,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AutopromptArgs {
    /// Comma-separated field names, in block order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub fields: Vec<String>,
    /// JSONL rows holding the fields.
    #[arg(long)]
    pub examples: PathBuf,
    #[command(flatten)]
    pub backend: BackendArg,
    #[arg(long)]
    pub out_template: PathBuf,
    /// Examples to try before giving up.
    #[arg(long, default_value_t = policy::DEFAULT_SAMPLE_CAP)]
    pub max_examples: usize,
}

#[derive(Debug, Args)]
pub struct EvalRougeArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(rendered.as_bytes())
            } else {
                stdout.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Entry point for the binary.
pub fn main_from_env() -> i32 {
    run(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Extract(a) => extract(a, stdout),
        Command::Stats(a) => stats(a, stdout),
        Command::Mask(a) => mask(a, stdout),
        Command::PromptRun(a) => prompt_run(a, stdout, stderr),
        Command::Classify(a) => classify(a, stdout, stderr),
        Command::Autoprompt(a) => autoprompt(a, stdout),
        Command::EvalRouge(a) => eval_rouge(a, stdout),
    }
}

fn print_json(stdout: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    writeln!(stdout, "{text}").map_err(data)
}

fn config_flag(field: &str) -> String {
    let flag = match field {
        "standard_threshold" => "min-text",
        "compact_threshold" => "min-text-compact",
        "min_text_ratio" => "ratio",
        other => return other.to_string(),
    };
    format!("--{flag}")
}

fn extract(a: ExtractArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            MhtmlConfig::from_toml(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => MhtmlConfig::default(),
    };
    if let Some(v) = a.min_text {
        cfg.standard_threshold = v;
    }
    if let Some(v) = a.min_text_compact {
        cfg.compact_threshold = v;
    }
    if let Some(v) = a.ratio {
        cfg.min_text_ratio = v;
    }
    if let Some(lang) = &a.lang {
        cfg.required_lang = (lang != "none").then(|| lang.clone());
    }
    if a.accept_missing_lang {
        cfg.accept_missing_lang = true;
    }
    cfg.validate().map_err(|ConfigError::Invalid { field, message }| {
        CliError::Usage(format!("invalid {}: {message}", config_flag(field)))
    })?;
    let mut opts = PipelineOptions {
        shard_size: a.shard_size,
        ..PipelineOptions::default()
    };
    if let Some(w) = a.workers {
        if w == 0 {
            return Err(CliError::Usage("invalid --workers: must be at least 1".into()));
        }
        opts.workers = w;
    }
    if a.shard_size == 0 {
        return Err(CliError::Usage("invalid --shard-size: must be at least 1".into()));
    }
    let summary = corpus::run_pipeline(&a.input, &cfg, &opts, &a.output).map_err(data)?;
    print_json(stdout, &summary)
}

fn load_tokenizer(spec: &str, special: &[&str]) -> Result<Tokenizer, CliError> {
    if spec == "whitespace" {
        return Ok(Tokenizer::whitespace_with_special(special));
    }
    Tokenizer::bpe_from_dir(Path::new(spec), special)
        .map_err(|e| CliError::Usage(format!("invalid --tokenizer: {e}")))
}

fn stats(a: StatsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.budget == 0 {
        return Err(CliError::Usage("invalid --budget: must be at least 1".into()));
    }
    let tokenizer = load_tokenizer(&a.tokenizer, &[])?;
    let records = corpus::read_shards(&a.input).map_err(data)?;
    let report = corpus_stats(&records, &tokenizer, a.budget).map_err(data)?;
    print_json(stdout, &report)
}

fn mask(a: MaskArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = MaskingConfig {
        lambda: a.lambda,
        mask_rate: a.mask_rate,
        hint_prob: a.hint_prob,
        epsilon: a.epsilon,
        seed: a.seed,
        mask_token: a.mask_token.clone(),
    };
    cfg.validate().map_err(|e| match e {
        MaskingError::Config { field, message } => {
            CliError::Usage(format!("invalid --{}: {message}", field.replace('_', "-")))
        }
        other => data(other),
    })?;
    let workers = match a.workers {
        Some(0) => return Err(CliError::Usage("invalid --workers: must be at least 1".into())),
        Some(w) => w,
        None => PipelineOptions::default().workers,
    };
    let tokenizer = load_tokenizer(&a.tokenizer, &[a.mask_token.as_str()])?;
    let summary =
        masking::emit_training_set(&a.input, &tokenizer, &cfg, workers, &a.output).map_err(data)?;
    print_json(stdout, &summary)
}

/// One JSONL input row: string fields plus an optional "id".
struct Row {
    id: String,
    fields: BTreeMap<String, String>,
}

fn read_rows(path: &Path) -> Result<Vec<Row>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| data(format!("{}:{}: {m}", path.display(), i + 1));
        let obj: serde_json::Map<String, Value> =
            serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let mut fields = BTreeMap::new();
        let mut id = (i + 1).to_string();
        for (k, v) in obj {
            let s = match v {
                Value::String(s) => s,
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                other => return Err(bad(format!("field {k:?} is not a scalar: {other}"))),
            };
            if k == "id" {
                id = s;
            } else {
                fields.insert(k, s);
            }
        }
        rows.push(Row { id, fields });
    }
    Ok(rows)
}

fn open_backend(arg: &BackendArg) -> Result<Box<dyn Backend>, CliError> {
    let spec = match &arg.backend {
        Some(s) => s.clone(),
        None => std::env::var(BACKEND_URL_ENV).map_err(|_| {
            CliError::Usage(format!("no --backend given and {BACKEND_URL_ENV} is not set"))
        })?,
    };
    Ok(backend_from_spec(&spec)?)
}

fn load_tpl(path: &Path) -> Result<PromptTemplate, CliError> {
    load_template(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_lines(
    output: &Option<PathBuf>,
    lines: &[Value],
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let mut text = String::new();
    for line in lines {
        text.push_str(&serde_json::to_string(line).map_err(data)?);
        text.push('\n');
    }
    match output {
        Some(path) => fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display()))),
        None => stdout.write_all(text.as_bytes()).map_err(data),
    }
}

fn prompt_run(a: PromptRunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let tpl = load_tpl(&a.template)?;
    let rows = read_rows(&a.data)?;
    let policy_slots: Vec<String> = tpl
        .mask_slots()
        .filter(|(_, m)| *m == HintMode::Policy)
        .map(|(s, _)| s.to_string())
        .collect();
    if policy_slots.is_empty() {
        return Err(CliError::Data(format!(
            "{}: template has no policy-hinted mask slot",
            a.template.display()
        )));
    }
    let s_bar = match a.s_bar {
        Some(0) => return Err(CliError::Usage("invalid --s-bar: must be at least 1".into())),
        Some(s) => s,
        None => {
            let tokenizer = load_tokenizer(&a.tokenizer, &[])?;
            let targets: Vec<&str> = rows
                .iter()
                .filter_map(|r| r.fields.get(&policy_slots[0]).map(String::as_str))
                .collect();
            let s = policy::estimate_s_bar(&targets, &tokenizer, a.sample_cap).map_err(|_| {
                CliError::Usage(format!(
                    "no --s-bar given and no row has a {:?} value to estimate it from",
                    policy_slots[0]
                ))
            })?;
            writeln!(stderr, "estimated s_bar = {s}").map_err(data)?;
            s
        }
    };
    let policy = SizeHintPolicy {
        s_bar,
        epsilon: a.epsilon,
        max_retries: a.max_retries,
        sample_cap: a.sample_cap,
    };
    policy.validate()?;
    let fallback = match &a.auto_template {
        Some(path) => Some(policy::fallback_from_auto(&tpl, &load_tpl(path)?)?),
        None => None,
    };
    let backend = open_backend(&a.backend)?;
    let mut lines = Vec::with_capacity(rows.len());
    let mut failed = 0;
    for row in &rows {
        match policy::run_generation(&tpl, &row.fields, &policy, backend.as_ref(), fallback.as_ref()) {
            Ok(out) => lines.push(json!({
                "input_id": row.id,
                "output": out.slot_outputs,
                "source": out.source,
                "attempts": out.attempts,
            })),
            Err(PolicyError::Exhausted { attempts }) => {
                failed += 1;
                lines.push(json!({
                    "input_id": row.id,
                    "output": Value::Null,
                    "source": "failed",
                    "attempts": attempts,
                }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_lines(&a.output, &lines, stdout)?;
    if failed > 0 {
        writeln!(stderr, "{failed} of {} input(s) produced no extractable output", rows.len())
            .map_err(data)?;
    }
    Ok(())
}

fn classify(a: ClassifyArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let verbalizers =
        load_verbalizers(&a.verbalizers).map_err(|e| data(format!("{}: {e}", a.verbalizers.display())))?;
    let tpl = load_tpl(&a.template)?.with_verbalizers(verbalizers);
    if !tpl.is_classification() {
        return Err(CliError::Data(format!(
            "{}: template has no {{{{verbalizer}}}} slot",
            a.template.display()
        )));
    }
    let rows = read_rows(&a.data)?;
    let backend = open_backend(&a.backend)?;
    let mut lines = Vec::with_capacity(rows.len());
    let (mut gold, mut correct) = (0, 0);
    for row in &rows {
        let result = policy::classify(&tpl, &row.fields, &[], backend.as_ref())?;
        if let Some(label) = row.fields.get("label") {
            gold += 1;
            correct += usize::from(*label == result.label);
        }
        lines.push(json!({
            "input_id": row.id,
            "label": result.label,
            "perplexities": result.perplexities,
        }));
    }
    write_lines(&a.output, &lines, stdout)?;
    if gold > 0 {
        writeln!(stderr, "accuracy {correct}/{gold} = {:.4}", correct as f64 / gold as f64)
            .map_err(data)?;
    }
    Ok(())
}

fn autoprompt(a: AutopromptArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let rows = read_rows(&a.examples)?;
    let backend = open_backend(&a.backend)?;
    let mut last = None;
    for (i, row) in rows.iter().take(a.max_examples).enumerate() {
        let mut blocks = Vec::with_capacity(a.fields.len());
        for field in &a.fields {
            let text = row.fields.get(field).ok_or_else(|| {
                CliError::Data(format!("example {} has no field {field:?}", row.id))
            })?;
            blocks.push((field.clone(), text.clone()));
        }
        let req = AutoPromptRequest {
            blocks,
            examples_used: i + 1,
        };
        match policy::auto_prompt(&req, backend.as_ref()) {
            Ok(tpl) => {
                fs::write(&a.out_template, tpl.to_template_string())
                    .map_err(|e| data(format!("{}: {e}", a.out_template.display())))?;
                return print_json(
                    stdout,
                    &json!({
                        "template": a.out_template.display().to_string(),
                        "examples_used": i + 1,
                        "fields": tpl.fields().collect::<Vec<_>>(),
                    }),
                );
            }
            Err(e @ (PolicyError::AutoPrompt(_) | PolicyError::Template(_))) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(match last {
        Some(e) => e.into(),
        None => CliError::Data(format!("{}: no examples", a.examples.display())),
    })
}

fn eval_rouge(a: EvalRougeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())));
    let pred = read(&a.pred)?;
    let refs = read(&a.reference)?;
    let pred: Vec<&str> = pred.lines().collect();
    let refs: Vec<&str> = refs.lines().collect();
    if pred.len() != refs.len() {
        return Err(CliError::Data(format!(
            "--pred has {} lines but --ref has {}",
            pred.len(),
            refs.len()
        )));
    }
    let scores: Vec<_> = pred.iter().zip(&refs).map(|(p, r)| rouge(p, r)).collect();
    print_json(
        stdout,
        &json!({ "lines": scores, "mean": mean_score(&scores) }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("hyperprompt").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["extract", "--bogus"]).0, EXIT_USAGE);
        let (code, _, err) = run_args(&["mask", "--input", "x", "--output", "y", "--lambda", "0"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--lambda"), "{err}");
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("eval-rouge"));
    }

    #[test]
    fn missing_input_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let (code, _, _) = run_args(&[
            "extract",
            "--input",
            dir.path().join("nope").to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn ratio_flag_is_named() {
        let (code, _, err) = run_args(&["extract", "--input", "a", "--output", "b", "--ratio", "1.5"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--ratio"), "{err}");
    }

    #[test]
    fn unreachable_backend_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let tpl = dir.path().join("t.tpl");
        fs::write(&tpl, "<title>{{mask:title|hint=policy}}</title><p>{{field:body}}</p>").unwrap();
        let rows = dir.path().join("d.jsonl");
        fs::write(&rows, "{\"body\":\"x\"}\n").unwrap();
        // Port 9 (discard) on localhost is closed in the test sandbox.
        let (code, _, err) = run_args(&[
            "prompt-run",
            "--template",
            tpl.to_str().unwrap(),
            "--data",
            rows.to_str().unwrap(),
            "--backend",
            "http://127.0.0.1:9",
            "--s-bar",
            "4",
        ]);
        assert_eq!(code, EXIT_BACKEND, "{err}");
    }
}
