//! Imports a BRATS-style NIfTI directory tree and preprocesses it.
//!
//! Without an argument a tiny tree is first written to a temporary
//! directory from synthetic phantoms, so the example runs anywhere.
//!
//! ```text
//! cargo run --release --example nifti_import -- [brats_root]
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use gliomaseg::pipeline::{preprocess_cases, synthesize_cases};
use gliomaseg::volume::nifti::{encode_nifti, load_brats_dataset, NiftiData};
use gliomaseg::volume::{Case, Grade, PreprocessConfig};

const SUFFIXES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

fn write_tree(root: &Path, cases: &[Case]) -> gliomaseg::Result<()> {
    for case in cases {
        let grade = if case.grade == Grade::Hgg { "HGG" } else { "LGG" };
        let dir = root.join(grade).join(case.id());
        fs::create_dir_all(&dir).expect("create case directory");
        let dims = case.volume.dims();
        for (m, suffix) in SUFFIXES.iter().enumerate() {
            // Store as int16 with a slope, as scanners often do.
            let raw = case
                .volume
                .modality(m)
                .iter()
                .map(|&v| (v * 10.0).round() as i16)
                .collect();
            let bytes = encode_nifti(dims, &NiftiData::I16(raw), Some((0.1, 0.0)))?;
            fs::write(dir.join(format!("{}_{suffix}.nii", case.id())), bytes).expect("write modality");
        }
        let seg = encode_nifti(dims, &NiftiData::U8(case.labels.labels().to_vec()), None)?;
        fs::write(dir.join(format!("{}_seg.nii", case.id())), seg).expect("write labels");
    }
    Ok(())
}

fn main() -> gliomaseg::Result<()> {
    let root = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let root = std::env::temp_dir().join("gliomaseg-brats-demo");
            let _ = fs::remove_dir_all(&root);
            write_tree(&root, &synthesize_cases(3, [48, 40, 32], 0.7, 1)?)?;
            root
        }
    };

    let cases = load_brats_dataset(&root)?;
    println!("loaded {} cases from {}", cases.len(), root.display());
    let cases = preprocess_cases(cases, &PreprocessConfig::default())?;
    for case in &cases {
        let flair = case.volume.modality(3);
        let brain: Vec<f32> = flair.iter().copied().filter(|&v| v != 0.0).collect();
        let mean = brain.iter().map(|&v| v as f64).sum::<f64>() / brain.len() as f64;
        let var = brain.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / brain.len() as f64;
        println!(
            "{:<12} dims {:?}  flair brain mean {mean:+.3} std {:.3}  labels {:?}",
            case.id(),
            case.volume.dims(),
            var.sqrt(),
            case.labels.labels().iter().collect::<BTreeSet<_>>()
        );
    }
    Ok(())
}
