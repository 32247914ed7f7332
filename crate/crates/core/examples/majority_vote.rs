//! How the base network and the subnetworks vote, including a tie.
//!
//!     cargo run --example majority_vote

use ensnet::inference::vote_logits;

fn show(title: &str, logits: &[Vec<f64>]) {
    let r = vote_logits(logits);
    println!("{title}");
    for (i, (p, probs)) in r.voter_predictions.iter().zip(&r.voter_probs).enumerate() {
        let who = if i == 0 { "base".to_string() } else { format!("subnet{}", i - 1) };
        println!("  {who:<8} votes {p}  (p = {:.2})", probs[*p]);
    }
    println!("  counts {:?} -> class {}{}\n", r.counts(), r.winner, if r.tie_broken { " (tie broken)" } else { "" });
}

fn main() {
    // Three classes, five voters.
    show(
        "clear majority: three of five pick class 2",
        &[
            vec![0.1, 0.2, 2.0],
            vec![1.5, 0.0, 0.3],
            vec![0.0, 0.1, 1.2],
            vec![0.2, 0.1, 0.9],
            vec![0.0, 2.2, 0.1],
        ],
    );
    // Two votes each for classes 0 and 1. Class 1 collects more summed
    // probability across all five voters, so it wins the tie.
    show(
        "tie between classes 0 and 1",
        &[
            vec![0.3, 0.1, 0.0],
            vec![0.2, 0.0, 0.1],
            vec![0.0, 2.5, 0.0],
            vec![0.1, 1.8, 0.0],
            vec![0.0, 0.4, 1.0],
        ],
    );
}
