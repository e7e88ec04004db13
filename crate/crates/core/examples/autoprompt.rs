//! Builds a prompt template by letting the model wrap example fields in markup.

use hyperprompt::backend::ScriptBackend;
use hyperprompt::policy::{auto_prompt, AutoPromptRequest};

pub fn main() {
    let summary = "us rejects charges against its ambassador in bolivia";
    let article = "the us state department said wednesday it had received no formal word from bolivia";
    let req = AutoPromptRequest {
        blocks: vec![("summary".into(), summary.into()), ("article".into(), article.into())],
        examples_used: 1,
    };
    println!("masked document:\n{}\n", req.masked_document());

    let generated = format!(
        "<html lang=\"en\">\n  <head>\n    <title>\n      {summary} | The Washington Post\n    </title>\n  </head>\n  \
         <body>\n    <div class = \"post-body entry-content\">\n      <p> {article}\n      </p>\n    </div>\n  </body>\n</html>"
    );
    let backend = ScriptBackend::new().push_text(generated, 40.0, 60);
    let tpl = auto_prompt(&req, &backend).unwrap();
    println!("{}", tpl.to_template_string());
}
