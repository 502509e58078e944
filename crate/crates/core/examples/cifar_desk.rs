//! The desk-scale image experiment: a small CNN on 5000 CIFAR-format
//! images, trained with baseline augmentation, uniform averaging and the
//! hard reweighted objective from the same seed.
//!
//! ```bash
//! cargo run --release -p mmel --example cifar_desk -- 0 30
//! ```
//!
//! The arguments are the seed and the number of epochs. Runs take about a
//! minute per mode on one core.

use mmel::cli::{run_training, Config};
use mmel::engine::TrainMode;

fn main() -> mmel::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let epochs = args.next().and_then(|a| a.parse().ok());
    let out = tempfile_dir()?;
    for mode in [TrainMode::BaselineDa, TrainMode::Uniform, TrainMode::MmelHard] {
        let mut cfg = Config::preset("cifar-desk")?;
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.out_dir = out.join(format!("{:?}", mode).to_lowercase());
        if let Some(e) = epochs {
            cfg.lr_milestones = cfg.lr_milestones.iter().map(|m| m * e / cfg.epochs).collect();
            cfg.epochs = e;
        }
        let run = run_training(&cfg)?;
        let last = run.metrics.last().expect("one epoch at least");
        println!(
            "{:<12} train {:.3} eval {:.3} ({})",
            format!("{:?}", mode),
            last.train_acc,
            last.eval_acc.unwrap_or(f64::NAN),
            run.metrics_path.display()
        );
    }
    Ok(())
}

fn tempfile_dir() -> mmel::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("mmel-cifar-desk");
    std::fs::create_dir_all(&dir).map_err(|e| mmel::Error::Config(format!("{}: {}", dir.display(), e)))?;
    Ok(dir)
}
