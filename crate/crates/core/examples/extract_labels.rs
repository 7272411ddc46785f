//! Turns raw completions into schema labels and confidence scores.

use annoweave::extraction::{compute_confidence, extract_text, tally_invalid};
use annoweave::model::LabelSchema;

fn main() {
    let schema = LabelSchema::new("nli", ["entailment", "not entailment"]);
    let responses = [
        "entailment",
        " Entailment.",
        "Label: not entailment",
        "NOT ENTAILMENT!",
        "It is entailment, or maybe not entailment",
        "notentailed",
        "   ",
    ];
    let results: Vec<_> = responses.iter().map(|r| extract_text(r, &schema)).collect();
    for (raw, result) in responses.iter().zip(&results) {
        println!("{raw:?} -> {}", serde_json::to_string(&result.outcome).unwrap());
    }
    for c in tally_invalid(&results) {
        println!("invalid {:?} x{}", c.text, c.count);
    }

    // exp of the mean token log probability
    let conf = compute_confidence(Some(&[-0.05, -0.2, -0.01])).unwrap();
    println!("confidence {:.4}", conf.unwrap());
    println!("no logprobs -> {:?}", compute_confidence(None).unwrap());
}
