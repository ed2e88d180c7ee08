//! Dice and Hausdorff distances on hand-built masks, then a per-case
//! sub-region report for a perturbed label volume.
//!
//! ```text
//! cargo run --release --example evaluate_metrics
//! ```

use gliomaseg::metrics::{
    dice, evaluate_cases, hausdorff, hausdorff95, BinaryMask, DistanceMode, MetricsConfig, MetricsReport,
};
use gliomaseg::volume::LabelVolume;

fn ball(dims: [usize; 3], c: [f64; 3], r: f64) -> BinaryMask {
    BinaryMask::from_fn(dims, |x, y, z| {
        let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        d.iter().map(|v| v * v).sum::<f64>() <= r * r
    })
}

fn main() -> gliomaseg::Result<()> {
    let dims = [32, 32, 32];
    let truth = ball(dims, [16.0, 16.0, 16.0], 8.0);
    for shift in [0.0, 1.0, 2.0, 4.0] {
        let pred = ball(dims, [16.0 + shift, 16.0, 16.0], 8.0);
        println!(
            "shift {shift:>3}: Dice {:.4}  HD95 {:.3}  HD {:.3}",
            dice(&pred, &truth)?,
            hausdorff95(&pred, &truth)?.unwrap_or(f64::NAN),
            hausdorff(&pred, &truth, 100.0, DistanceMode::Surface)?.unwrap_or(f64::NAN),
        );
    }

    // One stray voxel barely moves HD95 but sets the full Hausdorff distance.
    let mut bits = truth.bits().to_vec();
    bits[truth.index(1, 1, 1)] = true;
    let outlier = BinaryMask::new(dims, bits)?;
    println!(
        "stray voxel: HD95 {:.3}  HD {:.3}",
        hausdorff95(&outlier, &truth)?.unwrap_or(f64::NAN),
        hausdorff(&outlier, &truth, 100.0, DistanceMode::Surface)?.unwrap_or(f64::NAN),
    );

    // Nested labels: edema shell, necrotic core, enhancing rim.
    let labels = |r_core: f64| {
        let wt = ball(dims, [16.0, 16.0, 16.0], 10.0);
        let tc = ball(dims, [16.0, 16.0, 16.0], r_core);
        let nec = ball(dims, [16.0, 16.0, 16.0], r_core - 2.0);
        let v = (0..wt.bits().len())
            .map(|i| match (wt.bits()[i], tc.bits()[i], nec.bits()[i]) {
                (_, _, true) => 1,
                (_, true, _) => 4,
                (true, _, _) => 2,
                _ => 0,
            })
            .collect();
        LabelVolume::new(dims, v)
    };
    let truth = labels(6.0)?;
    let pred = labels(5.0)?;
    let cfg = MetricsConfig::default();
    let report = MetricsReport::new(
        "demo",
        cfg.clone(),
        evaluate_cases(&[("ball".into(), &pred, &truth)], &cfg)?,
    );
    print!("{}", report.to_csv());
    Ok(())
}
