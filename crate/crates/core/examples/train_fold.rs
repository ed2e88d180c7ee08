//! Trains one cross-validation fold on synthetic phantoms, then reports the
//! held-out whole-tumor Dice and round-trips the checkpoint through disk.
//!
//! ```text
//! cargo run --release --example train_fold -- [epochs] [fold]
//! ```

use gliomaseg::model::checkpoint::Checkpoint;
use gliomaseg::model::{NetworkSpec, Variant};
use gliomaseg::pipeline::{
    fold_cases, predict_volume, preprocess_cases, smooth, synthesize_cases, train_with_progress, validation_wt_dice,
    TrainConfig,
};
use gliomaseg::volume::{PreprocessConfig, View};

fn main() -> gliomaseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(6, |s| s.parse().expect("epochs must be an integer"));
    let fold = args.next().map_or(0, |s| s.parse().expect("fold must be an integer"));

    let cases = preprocess_cases(
        synthesize_cases(6, [48, 48, 32], 0.75, 3)?,
        &PreprocessConfig::default(),
    )?;
    let config = TrainConfig {
        view: View::Axial,
        fold,
        folds: 3,
        epochs,
        network: NetworkSpec {
            depth: 2,
            ..NetworkSpec::with_width(8, Variant::MinorModsPlusAttention)
        },
        validation_interval: 1,
        ..TrainConfig::default()
    };

    let started = std::time::Instant::now();
    let mut losses = Vec::new();
    let ckpt = train_with_progress(&config, &cases, &mut |r| {
        losses.push(r.train_loss);
        let dice = r.validation_wt_dice.map_or("-".into(), |d| format!("{d:.3}"));
        println!(
            "epoch {:>2}  loss {:.4}  held-out WT Dice {dice}",
            r.epoch, r.train_loss
        );
    })?;
    println!(
        "trained in {:.1}s; smoothed loss {:?}",
        started.elapsed().as_secs_f64(),
        smooth(&losses, 3)
    );

    let (_, held_out) = fold_cases(&cases, config.folds, fold, config.split_seed)?;
    println!(
        "final held-out WT Dice {:.3}",
        validation_wt_dice(&ckpt, &held_out, View::Axial)?
    );

    let path = std::env::temp_dir().join("gliomaseg-train-fold.uckp");
    ckpt.save(&path)?;
    let reloaded = Checkpoint::load(&path)?;
    let a = predict_volume(std::slice::from_ref(&ckpt), &held_out[0].volume, View::Axial)?;
    let b = predict_volume(std::slice::from_ref(&reloaded), &held_out[0].volume, View::Axial)?;
    assert_eq!(a.data(), b.data());
    println!("checkpoint {} reloads with identical predictions", path.display());
    Ok(())
}
