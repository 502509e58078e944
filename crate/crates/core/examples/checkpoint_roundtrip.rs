//! Saves a trained model with its input normalization, reloads it in both
//! precisions and compares predictions.
//!
//! ```bash
//! cargo run --release -p mmel --example checkpoint_roundtrip
//! ```

use mmel::augment::AugmentedGroup;
use mmel::data::{compute_normalization, make_blobs, InputEncoder};
use mmel::diffcore::{checkpoint, LrSchedule, Model, ModelSpec};
use mmel::engine::{evaluate, train, TrainConfig, TrainData, TrainMode};

fn main() -> mmel::Result<()> {
    let data = make_blobs(300, 3, 2, 9)?;
    let groups: Vec<_> = data.samples.iter().map(AugmentedGroup::singleton).collect();
    let normalization = compute_normalization(&data.samples);
    let encoder = InputEncoder::new(vec![2], normalization.clone());
    let cfg = TrainConfig {
        mode: TrainMode::Uniform,
        batch_size: 32,
        epochs: 5,
        schedule: LrSchedule::constant(0.05),
        n_aug: 0,
        ..TrainConfig::default()
    };
    let out = train::<f32>(
        &cfg,
        TrainData {
            spec: ModelSpec::mlp(2, 8, 3),
            encoder: encoder.clone(),
            samples: &data.samples,
            groups: &groups,
            eval: None,
            teacher: None,
            init: None,
        },
    )?;

    let bytes = checkpoint::encode(&out.model, normalization.as_ref())?;
    println!(
        "checkpoint {} bytes, stored as {:?}",
        bytes.len(),
        checkpoint::peek_dtype(&bytes)?
    );
    let (same, header): (Model<f32>, _) = checkpoint::decode(&bytes)?;
    assert_eq!(same.params(), out.model.params());
    assert_eq!(header.normalization, normalization);
    let (wide, _): (Model<f64>, _) = checkpoint::decode(&bytes)?;

    let before = evaluate(&out.model, &encoder, &data.samples, 0.5)?;
    let after = evaluate(&same, &encoder, &data.samples, 0.5)?;
    let widened = evaluate(&wide, &encoder, &data.samples, 0.5)?;
    println!(
        "accuracy trained {:.4} reloaded {:.4} as f64 {:.4}",
        before.score, after.score, widened.score
    );
    assert_eq!(before, after);
    Ok(())
}
