//! Zero-shot title generation with a structured prompt.
//!
//! The echo backend fills every sentinel with a fixed string, which is
//! enough to see instantiation and extraction end to end.

use std::collections::BTreeMap;

use hyperprompt::backend::EchoBackend;
use hyperprompt::policy::{run_generation, SizeHintPolicy};
use hyperprompt::prompt::{instantiate, load_template};

pub fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
    let tpl = load_template(&dir.join("title.tpl")).unwrap();
    let inputs = BTreeMap::from([(
        "article".to_string(),
        "The city council approved a new budget for the river crossing on Monday.".to_string(),
    )]);

    let preview = instantiate(&tpl, &inputs, &BTreeMap::from([("title".to_string(), Some(7))])).unwrap();
    println!("{}", preview.text);

    let backend = EchoBackend::new("Council approves river crossing budget");
    let outcome = run_generation(&tpl, &inputs, &SizeHintPolicy::new(7), &backend, None).unwrap();
    println!("title: {}", outcome.slot_outputs["title"]);
    println!("source: {}", outcome.source);
}
