//! Trains a small MLP on jittered Gaussian blobs under every training mode
//! through the library API.
//!
//! ```bash
//! cargo run --release -p mmel --example train_blobs -- 3
//! ```

use mmel::augment::build_vector_group;
use mmel::data::{compute_normalization, make_blobs, InputEncoder};
use mmel::diffcore::{LrSchedule, ModelSpec};
use mmel::engine::{train, TrainConfig, TrainData, TrainMode};
use mmel::reweight::{LossMode, MmelConfig};

fn main() -> mmel::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let all = make_blobs(900, 4, 2, seed)?;
    let (train_set, eval_set) = all.samples.split_at(600);
    let groups = train_set
        .iter()
        .map(|s| build_vector_group(s, 4, 1.0, seed))
        .collect::<mmel::Result<Vec<_>>>()?;
    let normalization = compute_normalization(train_set);

    for mode in [
        TrainMode::BaselineDa,
        TrainMode::Uniform,
        TrainMode::MmelHard,
        TrainMode::MmelSoft,
    ] {
        let cfg = TrainConfig {
            mode,
            batch_size: 32,
            epochs: 20,
            schedule: LrSchedule::new(0.05, vec![15], 0.2)?,
            seed,
            n_aug: 4,
            mmel: MmelConfig {
                mode: if mode == TrainMode::MmelSoft {
                    LossMode::Soft
                } else {
                    LossMode::Hard
                },
                ..MmelConfig::default()
            },
            ..TrainConfig::default()
        };
        let data = TrainData {
            spec: ModelSpec::mlp(2, 32, 4),
            encoder: InputEncoder::new(vec![2], normalization.clone()),
            samples: train_set,
            groups: &groups,
            eval: Some(eval_set),
            teacher: None,
            init: None,
        };
        let out = train::<f64>(&cfg, data)?;
        let last = out.metrics.last().expect("one epoch at least");
        println!(
            "{:<12} loss {:.4} max weight {:.3} train {:.3} eval {:.3}",
            format!("{:?}", mode),
            last.weighted_loss,
            last.max_weight,
            last.train_acc,
            last.eval_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
