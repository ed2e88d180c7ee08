//! Runs a full cross-validated experiment from a TOML config: training per
//! view and fold, out-of-fold prediction, fusion and the summary report.
//!
//! ```text
//! cargo run --release --example experiment -- [config.toml] [output_dir]
//! ```

use std::path::PathBuf;

use gliomaseg::pipeline::ExperimentConfig;

fn main() -> gliomaseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml"),
        PathBuf::from,
    );
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    cfg.output_dir = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("gliomaseg-runs"), PathBuf::from);

    let outcome = gliomaseg::pipeline::run_experiment_with_log(&cfg, &mut |line| println!("{line}"))?;
    println!("\nrun directory {}", outcome.run_dir.display());
    print!("{}", outcome.summary.to_csv());
    Ok(())
}
