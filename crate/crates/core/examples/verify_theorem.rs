//! Checks the closed-form adversarial weights against a projected Newton
//! maximizer on random instances and prints the worst gaps.
//!
//! ```bash
//! cargo run --release -p mmel --example verify_theorem -- 1000 7
//! ```

use std::time::Instant;

use mmel::oracle::{summarize, verify_theorem1};

fn main() -> mmel::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let start = Instant::now();
    let reports = verify_theorem1(instances, seed)?;
    let elapsed = start.elapsed();

    let worst = reports.iter().max_by(|a, b| a.linf_gap.total_cmp(&b.linf_gap));
    if let Some(r) = worst {
        println!(
            "worst instance: n={} lambda_p={} linf_gap={:.3e} iterations={}",
            r.instance.losses.len(),
            r.instance.lambda_p,
            r.linf_gap,
            r.iterations
        );
    }
    let max_iters = reports.iter().map(|r| r.iterations).max().unwrap_or(0);
    let summary = summarize(&reports);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("max iterations {max_iters}, elapsed {:.2?}", elapsed);
    Ok(())
}
