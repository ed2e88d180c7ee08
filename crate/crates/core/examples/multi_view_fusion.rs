//! Trains an axial and a coronal network, predicts a held-out case from
//! both views and fuses the probability volumes.
//!
//! ```text
//! cargo run --release --example multi_view_fusion -- [epochs]
//! ```

use gliomaseg::metrics::{evaluate_case, MetricsConfig};
use gliomaseg::model::{NetworkSpec, Variant};
use gliomaseg::pipeline::{
    fold_cases, fuse_views, predict_volume, preprocess_cases, synthesize_cases, train, TrainConfig,
};
use gliomaseg::volume::{LabelVolume, PreprocessConfig, View};

fn main() -> gliomaseg::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(8, |s| s.parse().expect("epochs must be an integer"));
    let cases = preprocess_cases(
        synthesize_cases(6, [48, 48, 48], 0.75, 11)?,
        &PreprocessConfig::default(),
    )?;
    let base = TrainConfig {
        folds: 3,
        epochs,
        network: NetworkSpec {
            depth: 2,
            ..NetworkSpec::with_width(8, Variant::MinorModsPlusAttention)
        },
        validation_interval: 0,
        ..TrainConfig::default()
    };
    let (_, held_out) = fold_cases(&cases, base.folds, base.fold, base.split_seed)?;
    let case = held_out[0];
    let metrics = MetricsConfig::default();

    let mut probs = Vec::new();
    for view in [View::Axial, View::Coronal] {
        let ckpt = train(&TrainConfig { view, ..base.clone() }, &cases)?;
        probs.push(predict_volume(std::slice::from_ref(&ckpt), &case.volume, view)?);
    }
    let (_, fused) = fuse_views(&probs[0], &probs[1])?;

    let show = |name: &str, pred: &LabelVolume| -> gliomaseg::Result<()> {
        let row: Vec<String> = evaluate_case(pred, &case.labels, &metrics)?
            .iter()
            .map(|m| {
                let hd = m.hausdorff.map_or("n/a".into(), |d| format!("{d:.2}"));
                format!("{} Dice {:.3} HD95 {hd}", m.region.abbrev(), m.dice)
            })
            .collect();
        println!("{name:<8} {}", row.join(" | "));
        Ok(())
    };
    println!("held-out case {}", case.id());
    show("axial", &probs[0].to_labels()?)?;
    show("coronal", &probs[1].to_labels()?)?;
    show("fused", &fused)?;
    Ok(())
}
