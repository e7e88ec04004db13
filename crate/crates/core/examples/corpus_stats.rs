//! Runs the extraction pipeline over a directory and reports corpus statistics.
//!
//! Usage: `cargo run --example corpus_stats [DIR_OR_WARC]`

use std::path::PathBuf;

use hyperprompt::corpus::{read_shards, run_pipeline, PipelineOptions};
use hyperprompt::mhtml::{corpus_stats, MhtmlConfig};
use hyperprompt::tokenizer::Tokenizer;

pub fn main() {
    let input = std::env::args().skip(1).map(PathBuf::from).find(|p| p.exists()).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pages")
    });
    let out = tempfile::tempdir().unwrap();
    let summary = run_pipeline(
        &input,
        &MhtmlConfig::default(),
        &PipelineOptions::default(),
        out.path(),
    )
    .expect("pipeline runs");
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());

    let records = read_shards(out.path()).unwrap();
    let report = corpus_stats(&records, &Tokenizer::whitespace(), 1024).unwrap();
    println!(
        "mean reduction {:.3}, median {:.3}, {} of {} fit in {} tokens",
        report.mean_reduction, report.median_reduction, report.fit_count, report.records, report.budget
    );
}
