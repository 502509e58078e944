//! Trains a teacher on the keyword task, then relabels masked-token
//! augmentations with it and counts how often the augmentation changed the
//! class.
//!
//! ```bash
//! cargo run --release -p mmel --example teacher_relabel
//! ```

use mmel::augment::{build_text_group, AugmentedGroup, Payload, Target, UnigramPredictor};
use mmel::data::{InputEncoder, TextTask};
use mmel::diffcore::{LrSchedule, ModelSpec};
use mmel::engine::{train, TrainConfig, TrainData, TrainMode};
use mmel::teacher::{argmax, disagreement_target, relabel_hard, TeacherHandle};

fn main() -> mmel::Result<()> {
    let task = TextTask::default();
    let data = task.generate(800, 1, "train")?;
    let eval = task.generate(400, 1, "eval")?;
    let corpus = data.samples.iter().filter_map(|s| match &s.payload {
        Payload::Text { tokens } => Some(tokens.as_slice()),
        _ => None,
    });
    let predictor = UnigramPredictor::from_corpus(task.vocab(), corpus)?;
    let groups = data
        .samples
        .iter()
        .map(|s| build_text_group(s, 4, 0.4, &predictor, 1))
        .collect::<mmel::Result<Vec<_>>>()?;

    let encoder = InputEncoder::new(vec![task.vocab()], None);
    let cfg = TrainConfig {
        mode: TrainMode::BaselineDa,
        batch_size: 32,
        epochs: 15,
        schedule: LrSchedule::new(0.1, vec![10], 0.2)?,
        n_aug: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let singles: Vec<_> = groups
        .iter()
        .map(|g| AugmentedGroup::singleton(&g.original_sample()))
        .collect();
    let out = train::<f64>(
        &cfg,
        TrainData {
            spec: ModelSpec::mlp(task.vocab(), 16, task.classes),
            encoder: encoder.clone(),
            samples: &data.samples,
            groups: &singles,
            eval: Some(&eval.samples),
            teacher: None,
            init: None,
        },
    )?;
    println!(
        "teacher eval accuracy {:.3}",
        out.metrics.last().and_then(|m| m.eval_acc).unwrap_or(0.0)
    );
    let teacher = TeacherHandle::from_model(out.model, encoder)?;

    let (mut flipped, mut total) = (0, 0);
    for g in &groups {
        let relabeled = relabel_hard(g, &teacher)?;
        let Target::Class(label) = g.label else { unreachable!() };
        for i in 1..relabeled.len() {
            let Target::Soft(p) = relabeled.target(i) else {
                unreachable!()
            };
            total += 1;
            if argmax(p) != label {
                flipped += 1;
            }
        }
    }
    println!(
        "teacher moved {} of {} augmented members to another class",
        flipped, total
    );

    let g = &groups[0];
    for m in &g.members[1..] {
        match disagreement_target(&teacher, m, &g.original)? {
            Some(p) => println!("disagrees, soft target {:?}", p),
            None => println!("agrees, student keeps its own output as target"),
        }
    }
    Ok(())
}
