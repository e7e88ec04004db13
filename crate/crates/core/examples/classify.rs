//! Zero-shot classification by perplexity over verbalized candidates.

use std::collections::BTreeMap;

use hyperprompt::backend::{ScoreRule, ScriptBackend};
use hyperprompt::policy::classify;
use hyperprompt::prompt::{load_template, load_verbalizers};

pub fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
    let tpl = load_template(&dir.join("rte.tpl"))
        .unwrap()
        .with_verbalizers(load_verbalizers(&dir.join("rte.verbalizers.json")).unwrap());
    let inputs = BTreeMap::from([
        ("premise".to_string(), "The museum reopened on Monday after restoration.".to_string()),
        ("hypothesis".to_string(), "The museum reopened.".to_string()),
    ]);
    // Stand-in scores: the model finds "True" more likely here.
    let backend = ScriptBackend::new()
        .score_rule(ScoreRule::Contains("answer: True".into()), 30.0, 40)
        .score_rule(ScoreRule::Contains("answer: False".into()), 44.0, 40);
    let result = classify(&tpl, &inputs, &[], &backend).unwrap();
    for (label, ppl) in &result.perplexities {
        println!("{label:>15}: perplexity {ppl:.4}");
    }
    println!("label: {}", result.label);
}
