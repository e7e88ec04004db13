//! The size-hint retry policy against a scripted backend.
//!
//! The first two generations lose the closing anchor, so the policy widens the
//! hint around the expected length and keeps the lowest-perplexity output.

use std::collections::BTreeMap;

use hyperprompt::backend::ScriptBackend;
use hyperprompt::policy::{run_generation, SizeHintPolicy};
use hyperprompt::prompt::load_template;

pub fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
    let tpl = load_template(&dir.join("title.tpl")).unwrap();
    let inputs = BTreeMap::from([("article".to_string(), "Storms hit the coast.".to_string())]);
    let page = |title: &str| format!("<!DOCTYPE html>\n<html>\n  <title> {title} </title>\n</html>");

    let backend = ScriptBackend::new()
        .push_text("<title> Storms", 2.0, 4)
        .push_text("<title> Storms hit", 2.0, 4)
        .push_text(page("Storms batter the coast"), 6.0, 20)
        .push_text(page("Coastal storms"), 9.0, 20);
    let policy = SizeHintPolicy { epsilon: 0.2, ..SizeHintPolicy::new(5) };
    println!("hint schedule: {:?}", policy.hint_sequence());

    let outcome = run_generation(&tpl, &inputs, &policy, &backend, None).unwrap();
    for a in &outcome.attempts {
        let status = match (a.extracted, a.selected) {
            (false, _) => "anchors lost".to_string(),
            (true, sel) => format!("ppl {:.3}{}", a.perplexity.unwrap(), if sel { " <- selected" } else { "" }),
        };
        println!("round {} hint {:?}: {status}", a.round, a.hint.unwrap());
    }
    println!("title: {} ({})", outcome.slot_outputs["title"], outcome.source);
}
