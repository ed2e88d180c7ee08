//! Generates a small synthetic dataset, writes it in the MVOL format and
//! prints per-case tumor sub-region sizes.
//!
//! ```text
//! cargo run --release --example synth_phantom -- [out_dir] [cases]
//! ```

use std::path::PathBuf;

use gliomaseg::pipeline::{synthesize_cases, DEFAULT_HGG_FRACTION};
use gliomaseg::volume::{mvol, to_subregions, SubRegion};

fn main() -> gliomaseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("gliomaseg-phantoms"), PathBuf::from);
    let n: usize = args.next().map_or(6, |s| s.parse().expect("cases must be an integer"));

    let cases = synthesize_cases(n, [64, 64, 48], DEFAULT_HGG_FRACTION, 7)?;
    let manifest = mvol::write_dataset(&out, &cases, true)?;
    println!(
        "wrote {} cases ({} HGG) to {}",
        manifest.cases.len(),
        manifest.hgg_count(),
        out.display()
    );

    println!("{:<12} {:>5} {:>8} {:>8} {:>8}", "case", "grade", "WT", "TC", "ET");
    for case in &cases {
        let masks = to_subregions(&case.labels);
        let count = |r| masks.mask(r).iter().filter(|&&b| b).count();
        println!(
            "{:<12} {:>5} {:>8} {:>8} {:>8}",
            case.id(),
            format!("{:?}", case.grade),
            count(SubRegion::WholeTumor),
            count(SubRegion::TumorCore),
            count(SubRegion::EnhancingTumor),
        );
    }

    let back = mvol::load_dataset(&out)?;
    assert!(back.iter().zip(&cases).all(|(a, b)| a.labels == b.labels));
    println!("reloaded dataset matches");
    Ok(())
}
