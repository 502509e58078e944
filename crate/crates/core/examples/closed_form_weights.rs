//! Weights and objective values for one group of member losses, across a
//! range of temperatures.
//!
//! ```bash
//! cargo run --release -p mmel --example closed_form_weights -- 0.3 1.2 2.5 0.9
//! ```

use mmel::reweight::{hard_objective, kl_to_uniform, soft_objective, LossMode, MmelConfig};

fn main() -> mmel::Result<()> {
    let mut losses: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if losses.is_empty() {
        losses = vec![0.3, 1.2, 2.5, 0.9];
    }
    println!("losses {:?}", losses);
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("mean {:.4}  max {:.4}", mean, max);

    for lambda_p in [0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0] {
        let obj = hard_objective(&losses, lambda_p)?;
        let w: Vec<String> = obj.weights.as_slice().iter().map(|v| format!("{:.3}", v)).collect();
        println!(
            "lambda_p {:>6}  value {:.4}  kl {:.4}  w [{}]",
            lambda_p,
            obj.value,
            kl_to_uniform(&obj.weights),
            w.join(", ")
        );
    }

    // The soft form treats the first loss as the original's and the rest as
    // divergences of the augmented members.
    let cfg = MmelConfig {
        mode: LossMode::Soft,
        ..MmelConfig::default()
    };
    let soft = soft_objective(losses[0], &losses[1..], &cfg)?;
    println!(
        "soft objective {:.4}  weights {:?}",
        soft.value,
        soft.weights.as_slice()
    );
    Ok(())
}
