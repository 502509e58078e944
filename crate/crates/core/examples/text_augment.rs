//! Greedy masked-token augmentation on the synthetic keyword task.
//!
//! ```bash
//! cargo run --release -p mmel --example text_augment
//! ```

use mmel::augment::{build_text_group, Payload, UnigramPredictor};
use mmel::data::TextTask;

fn main() -> mmel::Result<()> {
    let task = TextTask::default();
    let data = task.generate(200, 5, "train")?;
    let corpus = data.samples.iter().filter_map(|s| match &s.payload {
        Payload::Text { tokens } => Some(tokens.as_slice()),
        _ => None,
    });
    let predictor = UnigramPredictor::from_corpus(task.vocab(), corpus)?;
    for sample in data.samples.iter().take(3) {
        let group = build_text_group(sample, 4, 0.25, &predictor, 5)?;
        println!("{} label {:?}", group.id, group.label);
        for (i, m) in group.members.iter().enumerate() {
            let Payload::Text { tokens } = m else { unreachable!() };
            println!("  {} {:?} keyword class {}", i, tokens, task.keyword_class(tokens));
        }
    }
    Ok(())
}
