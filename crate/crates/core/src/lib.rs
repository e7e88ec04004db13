//! Structured HTML prompting.
//!
//! The crate turns crawled web pages into Minimal-HTML ([`mhtml`]), builds
//! size-hinted span-masking examples from them ([`masking`]), and prompts an
//! HTML language model with templates ([`prompt`]) through a pluggable
//! [`backend`]. [`policy`] holds the size-hint retry policy, perplexity
//! classification and auto-prompting; [`metrics`] scores generations with ROUGE.
//!
//! ```
//! use std::collections::BTreeMap;
//! use hyperprompt::backend::EchoBackend;
//! use hyperprompt::policy::{run_generation, SizeHintPolicy};
//! use hyperprompt::prompt::parse_template;
//!
//! let tpl = parse_template("title", "<title> {{mask:title|hint=policy}} </title>\n<p>{{field:body}}</p>").unwrap();
//! let inputs = BTreeMap::from([("body".to_string(), "Storms hit the coast.".to_string())]);
//! let backend = EchoBackend::new("Coastal storms");
//! let out = run_generation(&tpl, &inputs, &SizeHintPolicy::new(2), &backend, None).unwrap();
//! assert_eq!(out.slot_outputs["title"], "Coastal storms");
//! ```

pub mod dom;
pub mod tokenizer;
pub mod mhtml;
pub mod corpus;
pub mod masking;
pub mod prompt;
pub mod backend;
pub mod policy;
pub mod metrics;
pub mod cli;
