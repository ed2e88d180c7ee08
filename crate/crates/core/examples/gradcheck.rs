//! Finite-difference check of every differentiable operation.
//!
//! ```text
//! cargo run --release --example gradcheck -- [trials] [seed]
//! ```

use gliomaseg::gradcheck::{run, GradcheckConfig};

fn main() -> gliomaseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let trials = args
        .next()
        .map_or(Ok(20), |s| s.parse())
        .expect("trials must be an integer");
    let seed = args
        .next()
        .map_or(Ok(0), |s| s.parse())
        .expect("seed must be an integer");
    let started = std::time::Instant::now();
    let report = run(&GradcheckConfig {
        trials,
        seed,
        ..GradcheckConfig::default()
    })?;
    print!("{}", report.to_table());
    println!(
        "{} in {:.1}s",
        if report.passed() { "all checks passed" } else { "FAILED" },
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
