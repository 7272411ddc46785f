//! Renders the default template and a custom one against a few records and
//! shows which prompts fit the model's context window.

use annoweave::model::{LabelSchema, Record, RecordId};
use annoweave::prompt::{default_template, preview, ByteHeuristic, PromptBudget, PromptTemplate};

fn main() {
    let schema = LabelSchema::new("stance", ["agree", "disagree", "unrelated"]);
    let records: Vec<Record> = [
        "Comment: Buses should run all night. Opinion: Public transit needs more funding.",
        "Comment: I like soup. Opinion: Taxes are too high.",
        &"a very long comment ".repeat(600),
    ]
    .iter()
    .enumerate()
    .map(|(i, c)| Record {
        id: RecordId(i as u64 + 1),
        content: c.to_string(),
        extra: Default::default(),
    })
    .collect();

    let budget = PromptBudget {
        context_tokens: 2049,
        max_output_tokens: 16,
    };
    for p in preview(
        &default_template(&schema),
        &schema,
        &records,
        3,
        &budget,
        &ByteHeuristic,
    )
    .unwrap()
    {
        println!("record {} -> {:?}", p.record_id.0, p.validity);
        if p.validity.is_valid() {
            println!("{}\n", p.prompt);
        }
    }

    let custom = PromptTemplate::new(
        "Does the comment agree with the opinion?\n{input}\nAnswer ({options}):",
        &schema,
    )
    .unwrap();
    println!(
        "custom template {}:\n{}",
        custom.id().0,
        custom.render(&schema, &records[0].content).unwrap()
    );

    match PromptTemplate::new("no placeholder here", &schema) {
        Ok(_) => unreachable!(),
        Err(e) => println!("\nrejected: {e}"),
    }
}
