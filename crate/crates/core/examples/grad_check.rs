//! Compares group-step gradients with central finite differences in both
//! loss modes.
//!
//! ```bash
//! cargo run --release -p mmel --example grad_check -- 10
//! ```

use mmel::engine::TrainMode;
use mmel::oracle::{grad_check_group, MAX_GRAD_REL_ERROR};

fn main() -> mmel::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut worst = 0.0f64;
    for mode in [TrainMode::MmelHard, TrainMode::MmelSoft] {
        for seed in 0..seeds {
            let c = grad_check_group(seed, mode)?;
            println!(
                "{:?} seed {} params {} max rel error {:.2e}",
                mode, seed, c.params, c.max_rel_error
            );
            worst = worst.max(c.max_rel_error);
        }
    }
    println!("worst {:.2e} (limit {:.0e})", worst, MAX_GRAD_REL_ERROR);
    Ok(())
}
