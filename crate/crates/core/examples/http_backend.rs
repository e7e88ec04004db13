//! Talks to a model server over HTTP.
//!
//! Set `HTLM_BACKEND_URL` to a server exposing `/v1/infill` and `/v1/score`.

use hyperprompt::backend::{Backend, HttpBackend, InfillRequest, BACKEND_URL_ENV};

pub fn main() {
    let backend = match HttpBackend::from_env() {
        Ok(b) => b,
        Err(e) => {
            println!("{BACKEND_URL_ENV} is not usable ({e}); nothing to do");
            return;
        }
    };
    println!("backend: {}", backend.base_url());
    let prompt = "<html><title> <mask>6 </title><body>Storms hit the coast.</body></html>";
    match backend.infill(&InfillRequest::new(prompt)) {
        Ok(outputs) => {
            for o in outputs {
                println!("{} (ppl {:.3})", o.text, o.perplexity());
            }
        }
        Err(e) => println!("infill failed: {e}"),
    }
}
