//! Compares the three architecture variants: parameter counts at two widths,
//! then a short training run of each on the same fold.
//!
//! ```text
//! cargo run --release --example ablation -- [epochs]
//! ```

use gliomaseg::model::{build, NetworkSpec, Variant};
use gliomaseg::pipeline::{fold_cases, preprocess_cases, synthesize_cases, train, validation_wt_dice, TrainConfig};
use gliomaseg::volume::{PreprocessConfig, View};

const VARIANTS: [Variant; 3] = [Variant::PlainUnet, Variant::MinorMods, Variant::MinorModsPlusAttention];

fn main() -> gliomaseg::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(8, |s| s.parse().expect("epochs must be an integer"));

    println!("{:<30} {:>10} {:>10}", "variant", "F=8", "F=32");
    for v in VARIANTS {
        let count = |f| build(&NetworkSpec::with_width(f, v), 0).map(|p| p.num_parameters());
        println!("{:<30} {:>10} {:>10}", v.label(), count(8)?, count(32)?);
    }

    let cases = preprocess_cases(
        synthesize_cases(6, [48, 48, 32], 0.75, 5)?,
        &PreprocessConfig::default(),
    )?;
    println!("\nheld-out WT Dice after {epochs} epochs");
    for v in VARIANTS {
        let config = TrainConfig {
            folds: 3,
            epochs,
            network: NetworkSpec {
                depth: 2,
                ..NetworkSpec::with_width(8, v)
            },
            validation_interval: 0,
            ..TrainConfig::default()
        };
        let started = std::time::Instant::now();
        let ckpt = train(&config, &cases)?;
        let (_, held_out) = fold_cases(&cases, config.folds, config.fold, config.split_seed)?;
        println!(
            "{:<30} {:.3}  ({:.1}s)",
            v.label(),
            validation_wt_dice(&ckpt, &held_out, View::Axial)?,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
