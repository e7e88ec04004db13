//! ROUGE-1, ROUGE-2 and ROUGE-L between a prediction and a reference.

use hyperprompt::metrics::rouge;

pub fn main() {
    let pairs = [
        ("police killed the gunman", "the gunman was killed by police"),
        ("council approves budget", "council approves new budget"),
    ];
    for (pred, reference) in pairs {
        let s = rouge(pred, reference);
        println!("{pred:?} vs {reference:?}");
        println!(
            "  R1 {:.3}  R2 {:.3}  RL {:.3}",
            s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1
        );
    }
}
