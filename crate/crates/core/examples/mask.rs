//! Masks a document with size-hinted spans and rebuilds it from the targets.

use hyperprompt::masking::{mask_with_doc_seed, reconstruct, MaskingConfig};
use hyperprompt::tokenizer::Tokenizer;

pub fn main() {
    let doc = "<html><body><h1>River council approves budget</h1>\
               <p>The council approved a new budget on Monday after years of work \
               on the river crossing and the museum that reopened last spring.</p></body></html>";
    let cfg = MaskingConfig { seed: 11, ..MaskingConfig::default() };
    let tok = Tokenizer::whitespace_with_special(&[&cfg.mask_token]);
    let ex = mask_with_doc_seed("demo", doc, &tok, &cfg).unwrap();
    println!("source: {}", ex.source);
    println!("target: {}", ex.target);
    for (span, text) in ex.spans.iter().zip(ex.span_texts(&tok)) {
        println!("  {} tokens, hint {:?}: {text:?}", span.m, span.hint);
    }
    let rebuilt = reconstruct(&ex.source, &ex.spans, &ex.span_texts(&tok), &cfg.mask_token).unwrap();
    assert_eq!(rebuilt, doc);
    println!("reconstructed {} masked tokens", ex.masked_tokens());
}
