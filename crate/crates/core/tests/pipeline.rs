mod common;

use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use hyperprompt::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use hyperprompt::corpus::{read_manifest, read_shards, run_pipeline, PipelineOptions};
use hyperprompt::mhtml::MhtmlConfig;
use hyperprompt::prompt::load_template;
use serde_json::{json, Value};

use common::{fixtures, templates, TestServer};

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("hyperprompt").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sorted_pages() -> Vec<std::path::PathBuf> {
    let mut pages: Vec<_> = fs::read_dir(fixtures().join("pages"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    pages.sort();
    pages
}

#[test]
fn warc_gz_matches_directory_source() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("pages");
    fs::create_dir(&dir).unwrap();
    let warc = tmp.path().join("crawl.warc.gz");
    let mut file = fs::File::create(&warc).unwrap();
    for page in sorted_pages().iter().take(12) {
        let html = fs::read(page).unwrap();
        fs::write(dir.join(page.file_name().unwrap()), &html).unwrap();
        let mut block = b"HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\n\r\n".to_vec();
        block.extend(&html);
        let mut record = format!(
            "WARC/1.0\r\nWARC-Type: response\r\nWARC-Target-URI: http://example.org/{}\r\nContent-Length: {}\r\n\r\n",
            page.file_name().unwrap().to_string_lossy(),
            block.len()
        )
        .into_bytes();
        record.extend(block);
        record.extend(b"\r\n\r\n");
        // One gzip member per record, as crawl archives do.
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&record).unwrap();
        file.write_all(&gz.finish().unwrap()).unwrap();
    }
    drop(file);

    let cfg = MhtmlConfig::default();
    let opts = PipelineOptions { workers: 2, shard_size: 100 };
    let from_dir = run_pipeline(&dir, &cfg, &opts, &tmp.path().join("a")).unwrap();
    let from_warc = run_pipeline(&warc, &cfg, &opts, &tmp.path().join("b")).unwrap();
    assert_eq!(from_warc.ingested, 12);
    assert_eq!(from_warc.accepted, from_dir.accepted);
    assert_eq!(from_warc.rejected, from_dir.rejected);

    let a = read_shards(&tmp.path().join("a")).unwrap();
    let b = read_shards(&tmp.path().join("b")).unwrap();
    for r in &b {
        assert!(r.doc_id.starts_with("crawl.warc.gz#"), "{}", r.doc_id);
        assert_eq!(r.doc_id.len(), "crawl.warc.gz#".len() + 12);
        assert!(r.url.as_deref().unwrap().starts_with("http://example.org/"));
    }
    let mut ma: Vec<_> = a.iter().map(|r| r.mhtml.clone()).collect();
    let mut mb: Vec<_> = b.iter().map(|r| r.mhtml.clone()).collect();
    ma.sort();
    mb.sort();
    assert_eq!(ma, mb);
}

#[test]
fn manifest_counts_every_reject_code() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(
        &fixtures().join("pages"),
        &MhtmlConfig::default(),
        &PipelineOptions { workers: 1, shard_size: 15 },
        tmp.path(),
    )
    .unwrap();
    let m = read_manifest(tmp.path()).unwrap();
    assert_eq!(m.version, 1);
    assert_eq!(m.rejects.len(), 5);
    assert_eq!(m.rejects["wrong_lang"], 6);
    assert_eq!(m.rejects["low_ratio"], 3);
    assert_eq!(m.rejects["empty_after_prune"], 1);
    let counts: Vec<_> = m.shards.iter().map(|s| s.record_count).collect();
    assert_eq!(counts, vec![15, 15, 10]);
}

#[test]
fn cli_extract_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let pages = fixtures().join("pages");
    let mut dirs = Vec::new();
    for (i, workers) in ["1", "4"].iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let (code, stdout, err) = cli(&[
            "extract", "--input", s(&pages), "--output", s(&out), "--seed", "7", "--workers", workers,
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        let summary: Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(summary["accepted"], 40);
        dirs.push(out);
    }
    for name in ["manifest.json", "shard-00000.jsonl"] {
        assert_eq!(fs::read(dirs[0].join(name)).unwrap(), fs::read(dirs[1].join(name)).unwrap());
    }
}

#[test]
fn cli_flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("cfg.toml");
    fs::write(&config, "standard_threshold = 100000\nrequired_lang = \"fr\"\n").unwrap();
    let out = tmp.path().join("out");
    let (code, stdout, err) = cli(&[
        "extract", "--input", s(&fixtures().join("pages")), "--output", s(&out),
        "--config", s(&config), "--min-text", "128",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    // Threshold comes from the flag, language from the file.
    assert_eq!(summary["accepted"], 5);

    fs::write(&config, "no_such_key = 1\n").unwrap();
    let (code, _, _) = cli(&["extract", "--input", "x", "--output", "y", "--config", s(&config)]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn cli_stats_and_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let shards = tmp.path().join("shards");
    let (code, _, err) = cli(&["extract", "--input", s(&fixtures().join("pages")), "--output", s(&shards)]);
    assert_eq!(code, EXIT_OK, "{err}");

    let (code, stdout, err) = cli(&["stats", "--input", s(&shards), "--budget", "400"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["records"], 40);
    assert_eq!(report["budget"], 400);
    assert!(report["mean_reduction"].as_f64().unwrap() >= 0.5);

    let bpe = fixtures().join("bpe");
    let (code, stdout, err) = cli(&["stats", "--input", s(&shards), "--tokenizer", s(&bpe)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert!(report["fit_count"].as_u64().unwrap() <= 40);

    let masked = tmp.path().join("masked.jsonl");
    let (code, stdout, err) = cli(&[
        "mask", "--input", s(&shards), "--output", s(&masked), "--seed", "3", "--mask-token", "[M]",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["written"], 40);
    let text = fs::read_to_string(&masked).unwrap();
    assert_eq!(text.lines().count(), 40);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["source"].as_str().unwrap().contains("[M]"));

    let (code, _, err) = cli(&["mask", "--input", s(&shards), "--output", s(&masked), "--mask-rate", "1.5"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--mask-rate"), "{err}");
    let (code, _, _) = cli(&["stats", "--input", s(&tmp.path().join("missing"))]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn cli_eval_rouge_matches_hand_counts() {
    let (code, stdout, err) = cli(&[
        "eval-rouge",
        "--pred", s(&fixtures().join("rouge_pred.txt")),
        "--ref", s(&fixtures().join("rouge_ref.txt")),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(&stdout).unwrap();
    let f = |line: usize, metric: &str| v["lines"][line][metric]["f1"].as_f64().unwrap();
    assert!((f(0, "rouge1") - 0.8).abs() < 1e-6);
    assert!((v["lines"][0]["rouge1"]["precision"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-6);
    assert!((f(1, "rougeL") - 5.0 / 6.0).abs() < 1e-6);
    assert!((f(2, "rouge2") - 1.0).abs() < 1e-6);
    let mean = (0.8 + f(1, "rouge1") + 1.0) / 3.0;
    assert!((v["mean"]["rouge1"]["f1"].as_f64().unwrap() - mean).abs() < 1e-9);
}

#[test]
fn cli_eval_rouge_rejects_misaligned_files() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("p.txt");
    fs::write(&p, "one\ntwo\n").unwrap();
    let (code, _, _) = cli(&["eval-rouge", "--pred", s(&p), "--ref", s(&fixtures().join("rouge_ref.txt"))]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn cli_prompt_run_with_echo_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("rows.jsonl");
    let rows: String = fs::read_to_string(fixtures().join("gigaword.jsonl")).unwrap().lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(&data, rows).unwrap();
    let out = tmp.path().join("out.jsonl");
    let (code, _, err) = cli(&[
        "prompt-run", "--template", s(&templates().join("title.tpl")), "--data", s(&data),
        "--backend", "echo:Tax Reforms Announced", "--output", s(&out),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.contains("estimated s_bar"), "{err}");
    let lines: Vec<Value> = fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["input_id"], "g000");
    assert_eq!(lines[0]["output"]["title"], "Tax Reforms Announced");
    assert_eq!(lines[0]["source"], "initial");
    assert_eq!(lines[0]["attempts"].as_array().unwrap().len(), 1);
}

#[test]
fn cli_prompt_run_records_failures_and_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("rows.jsonl");
    fs::write(&data, "{\"id\": \"a\", \"article\": \"x\"}\n").unwrap();
    let garbage = TestServer::start(|_, _| {
        (200, json!({"outputs": [{"text": "no anchors here", "nll": 1.0, "token_count": 3}]}).to_string())
    });
    let (code, stdout, err) = cli(&[
        "prompt-run", "--template", s(&templates().join("title.tpl")), "--data", s(&data),
        "--backend", &garbage.url, "--s-bar", "4", "--max-retries", "2",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let line: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(line["source"], "failed");
    assert_eq!(line["output"], Value::Null);
    let hints: Vec<u64> = line["attempts"].as_array().unwrap().iter().map(|a| a["hint"].as_u64().unwrap()).collect();
    assert_eq!(hints, vec![4, 4, 4, 3, 5]);

    let server = TestServer::start(|req, _| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let prompt = body["prompt"].as_str().unwrap();
        let text = if prompt.contains("Washington Post") {
            prompt.replace("<mask>4", "fallback headline")
        } else {
            "nothing useful".to_string()
        };
        (200, json!({"outputs": [{"text": text, "nll": 1.0, "token_count": 3}]}).to_string())
    });
    let (code, stdout, err) = cli(&[
        "prompt-run", "--template", s(&templates().join("title.tpl")), "--data", s(&data),
        "--backend", &server.url, "--s-bar", "4", "--max-retries", "1",
        "--auto-template", s(&templates().join("gigaword_auto.tpl")),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let line: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(line["source"], "auto_template_fallback");
    assert_eq!(line["output"]["title"], "fallback headline");
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn cli_classify_over_http() {
    let server = TestServer::start(|req, _| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let text = body["text"].as_str().unwrap();
        // Entailment wins for the museum premise, not_entailment otherwise.
        let museum = text.contains("museum");
        let says_true = text.contains("answer: True");
        let nll = if museum == says_true { 10.0 } else { 20.0 };
        (200, json!({"nll": nll, "token_count": 30}).to_string())
    });
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("labels.jsonl");
    let (code, _, err) = cli(&[
        "classify", "--template", s(&templates().join("rte.tpl")),
        "--verbalizers", s(&templates().join("rte.verbalizers.json")),
        "--data", s(&fixtures().join("rte.jsonl")), "--backend", &server.url, "--output", s(&out),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.contains("accuracy 2/2"), "{err}");
    let labels: Vec<String> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["label"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(labels, vec!["entailment", "not_entailment"]);
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn cli_autoprompt_writes_loadable_template() {
    let doc = fs::read_to_string(fixtures().join("autoprompt_output.html")).unwrap();
    let server = TestServer::start(move |_, _| {
        (200, json!({"outputs": [{"text": doc, "nll": 4.0, "token_count": 60}]}).to_string())
    });
    let tmp = tempfile::tempdir().unwrap();
    let examples = tmp.path().join("ex.jsonl");
    fs::write(
        &examples,
        json!({
            "summary": "us rejects charges against its ambassador in bolivia",
            "article": "the us state department said wednesday it had received no formal word from bolivia that it was ..."
        })
        .to_string(),
    )
    .unwrap();
    let tpl_path = tmp.path().join("auto.tpl");
    let (code, stdout, err) = cli(&[
        "autoprompt", "--fields", "summary,article", "--examples", s(&examples),
        "--backend", &server.url, "--out-template", s(&tpl_path),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["fields"], json!(["summary", "article"]));
    let tpl = load_template(&tpl_path).unwrap();
    assert_eq!(tpl.fields().collect::<Vec<_>>(), vec!["summary", "article"]);
}

#[test]
fn cli_backend_falls_back_to_env_var_or_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("rows.jsonl");
    fs::write(&data, "{\"article\": \"x\"}\n").unwrap();
    std::env::remove_var("HTLM_BACKEND_URL");
    let (code, _, err) = cli(&[
        "prompt-run", "--template", s(&templates().join("title.tpl")), "--data", s(&data), "--s-bar", "3",
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("HTLM_BACKEND_URL"), "{err}");
}
