//! Simplifies one HTML page to Minimal-HTML.
//!
//! Usage: `cargo run --example simplify [PAGE.html]`

use std::path::PathBuf;

use hyperprompt::mhtml::{simplify_bytes, MhtmlConfig};

pub fn main() {
    let path = std::env::args().skip(1).map(PathBuf::from).find(|p| p.exists()).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pages/en-news-00.html")
    });
    let bytes = std::fs::read(&path).expect("readable page");
    match simplify_bytes(&path.display().to_string(), None, &bytes, &MhtmlConfig::default()) {
        Ok(record) => {
            println!("{}", record.mhtml);
            println!(
                "{} -> {} chars ({:.1}% smaller), text ratio {:.2}",
                record.raw_chars,
                record.mhtml_chars,
                100.0 * record.reduction(),
                record.text_ratio
            );
        }
        Err(reason) => println!("rejected: {reason}"),
    }
}
