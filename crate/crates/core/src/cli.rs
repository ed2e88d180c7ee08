//! The `gliomaseg` command line.
//!
//! Exit codes: 0 success, 1 invalid input or I/O failure, 2 numerical
//! failure (training divergence or a failed gradient check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::gradcheck::{self, GradcheckConfig};
use crate::metrics::{evaluate_cases, MetricsConfig, MetricsReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::{NetworkSpec, Variant};
use crate::pipeline::{
    fuse_views, load_run_reports, predict_volume, preprocess_cases, quantile_csv, run_experiment_with_log,
    synthesize_cases, train_with_progress, ExperimentConfig, ProbabilityVolume, TrainConfig, DEFAULT_HGG_FRACTION,
};
use crate::tensor::Fault;
use crate::volume::{mvol, nifti, Dims, PreprocessConfig, View};

/// Environment variable read for the worker thread count.
pub const THREADS_ENV: &str = "GLIOMASEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gliomaseg", version, about = "Multi-view 2D UNet brain tumor segmentation")]
pub struct Cli {
    /// Worker threads (defaults to $GLIOMASEG_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Clip and normalize a dataset (MVOL or BRATS-style NIfTI).
    Preprocess(PreprocessArgs),
    /// Train one view/fold model.
    Train(TrainArgs),
    /// Predict probability and label volumes with a fold ensemble.
    Predict(PredictArgs),
    /// Fuse axial and coronal predictions.
    Fuse(FuseArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Consolidate the reports of an experiment run.
    Report(ReportArgs),
    /// Run a cross-validated multi-view experiment from a TOML config.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub cases: usize,
    /// Volume extents as XxYxZ.
    #[arg(long, default_value = "64x64x64", value_parser = parse_dims)]
    pub dims: Dims,
    #[arg(long, default_value_t = DEFAULT_HGG_FRACTION)]
    pub hgg_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// MVOL dataset directory.
    #[arg(long, conflicts_with = "brats", required_unless_present = "brats")]
    pub input: Option<PathBuf>,
    /// BRATS-style directory of NIfTI cases.
    #[arg(long)]
    pub brats: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub clip_fraction: f64,
    /// Include background zeros in the clipping and normalization statistics.
    #[arg(long)]
    pub include_background: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed MVOL dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub view: Option<View>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    /// plain_unet, minor_mods or minor_mods_plus_attention.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Preprocessed MVOL dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoints whose softmax outputs are averaged.
    #[arg(long, required = true, num_args = 1..)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub view: View,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub axial: PathBuf,
    #[arg(long)]
    pub coronal: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Report path; the extension (.csv or .json) picks the format.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "evaluation")]
    pub name: String,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Corrupt the convolution backward pass (checker self-test).
    #[arg(long, hide = true)]
    pub inject_conv_fault: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory (defaults to the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let values: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad extent {p:?} in {s:?}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    match values.as_slice() {
        &[x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err(format!("expected three positive extents like 64x64x64, got {s:?}")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown variant {s:?} (plain_unet, minor_mods, minor_mods_plus_attention)"))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = flag.or(from_env) {
        if n == 0 {
            return Err(Error::InvalidArgument("thread count must be positive".into()));
        }
        // A pool configured earlier in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<i32> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Report(a) => report(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    if a.cases == 0 {
        return Err(Error::InvalidArgument("--cases must be at least 1".into()));
    }
    let cases = synthesize_cases(a.cases, a.dims, a.hgg_fraction, a.seed)?;
    fsutil::stage_dir(&a.out, a.force, |dir| mvol::write_dataset(dir, &cases, false).map(drop))?;
    let hgg = cases.iter().filter(|c| c.grade == crate::volume::Grade::Hgg).count();
    println!("wrote {} cases ({hgg} hgg) to {}", cases.len(), a.out.display());
    Ok(0)
}

fn preprocess(a: PreprocessArgs) -> Result<i32> {
    let cfg = PreprocessConfig {
        clip_fraction: a.clip_fraction,
        include_background: a.include_background,
    };
    let raw = match (&a.input, &a.brats) {
        (Some(dir), _) => mvol::load_dataset(dir)?,
        (None, Some(dir)) => nifti::load_brats_dataset(dir)?,
        (None, None) => return Err(Error::InvalidArgument("need --input or --brats".into())),
    };
    for src in a.input.iter().chain(&a.brats) {
        if same_path(src, &a.out) {
            return Err(Error::InvalidArgument(
                "--out must differ from the input directory".into(),
            ));
        }
    }
    let cases = preprocess_cases(raw, &cfg)?;
    fsutil::stage_dir(&a.out, a.force, |dir| mvol::write_dataset(dir, &cases, false).map(drop))?;
    println!("preprocessed {} cases into {}", cases.len(), a.out.display());
    Ok(0)
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn refuse_existing_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = String::from_utf8(fsutil::read(path)?)
                .map_err(|_| Error::format("train config", format!("{} is not UTF-8", path.display())))?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| Error::format("train config", e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(width) = a.width {
        cfg.network = NetworkSpec {
            base_width: width,
            ..cfg.network
        };
    }
    if let Some(variant) = a.variant {
        cfg.network.variant = variant;
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
    }
    set!(view <- view, fold <- fold, folds <- folds, epochs <- epochs, batch_size <- batch_size,
         learning_rate <- lr, momentum <- momentum, seed <- seed, split_seed <- split_seed);
    cfg.validate()?;
    refuse_existing_file(&a.out, a.force)?;
    let cases = mvol::load_dataset(&a.data)?;
    let ckpt = train_with_progress(&cfg, &cases, &mut |r| {
        let dice = r
            .validation_wt_dice
            .map_or(String::new(), |d| format!("  validation WT dice {d:.4}"));
        eprintln!("epoch {:>3}  loss {:.5}{dice}", r.epoch, r.train_loss);
    })?;
    ckpt.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn predict(a: PredictArgs) -> Result<i32> {
    let models = a
        .models
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    if same_path(&a.data, &a.out) {
        return Err(Error::InvalidArgument("--out must differ from --data".into()));
    }
    let cases = mvol::load_dataset(&a.data)?;
    let predictions = cases
        .par_iter()
        .map(|c| predict_volume(&models, &c.volume, a.view))
        .collect::<Result<Vec<_>>>()?;
    fsutil::stage_dir(&a.out, a.force, |dir| {
        for p in &predictions {
            write_prediction(&dir.join(&p.case_id), p)?;
        }
        Ok(())
    })?;
    println!(
        "predicted {} cases ({} view) into {}",
        predictions.len(),
        a.view,
        a.out.display()
    );
    Ok(0)
}

/// A prediction directory holds the probabilities plus an MVOL label case.
fn write_prediction(dir: &Path, p: &ProbabilityVolume) -> Result<()> {
    p.save(dir)?;
    mvol::write_case(dir, &p.case_id, None, Some(&p.to_labels()?), None)
}

fn load_predictions(root: &Path) -> Result<BTreeMap<String, ProbabilityVolume>> {
    let mut out = BTreeMap::new();
    for dir in mvol::discover_cases(root)? {
        let p = ProbabilityVolume::load(&dir)?;
        out.insert(p.case_id.clone(), p);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no predictions under {}",
            root.display()
        )));
    }
    Ok(out)
}

fn unmatched(left: &[&String], right: &[&String], left_name: &str, right_name: &str) -> Result<()> {
    let only_left: Vec<&str> = left
        .iter()
        .filter(|id| !right.contains(id))
        .map(|s| s.as_str())
        .collect();
    let only_right: Vec<&str> = right
        .iter()
        .filter(|id| !left.contains(id))
        .map(|s| s.as_str())
        .collect();
    if only_left.is_empty() && only_right.is_empty() {
        return Ok(());
    }
    let mut parts = Vec::new();
    if !only_left.is_empty() {
        parts.push(format!("only in {left_name}: {}", only_left.join(", ")));
    }
    if !only_right.is_empty() {
        parts.push(format!("only in {right_name}: {}", only_right.join(", ")));
    }
    Err(Error::InvalidArgument(format!(
        "unmatched case ids ({})",
        parts.join("; ")
    )))
}

fn fuse(a: FuseArgs) -> Result<i32> {
    let axial = load_predictions(&a.axial)?;
    let coronal = load_predictions(&a.coronal)?;
    unmatched(
        &axial.keys().collect::<Vec<_>>(),
        &coronal.keys().collect::<Vec<_>>(),
        "axial",
        "coronal",
    )?;
    let fused = axial
        .iter()
        .map(|(id, p)| fuse_views(p, &coronal[id]).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    fsutil::stage_dir(&a.out, a.force, |dir| {
        for p in &fused {
            write_prediction(&dir.join(&p.case_id), p)?;
        }
        Ok(())
    })?;
    println!("fused {} cases into {}", fused.len(), a.out.display());
    Ok(0)
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext != "csv" && ext != "json" {
        return Err(Error::InvalidArgument(format!(
            "--out must end in .csv or .json, got {}",
            a.out.display()
        )));
    }
    let cfg = MetricsConfig {
        percentile: a.percentile,
        ..MetricsConfig::default()
    };
    let pred = mvol::load_label_dir(&a.pred)?;
    let truth = mvol::load_label_dir(&a.truth)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument(format!("no cases under {}", a.pred.display())));
    }
    unmatched(
        &pred.keys().collect::<Vec<_>>(),
        &truth.keys().collect::<Vec<_>>(),
        "--pred",
        "--truth",
    )?;
    let triples: Vec<_> = pred.iter().map(|(id, p)| (id.clone(), p, &truth[id])).collect();
    let report = MetricsReport::new(&a.name, cfg.clone(), evaluate_cases(&triples, &cfg)?);
    let text = if ext == "csv" {
        report.to_csv()
    } else {
        report.to_json()?
    };
    fsutil::write_atomic(&a.out, text.as_bytes())?;
    println!("evaluated {} cases into {}", triples.len(), a.out.display());
    Ok(0)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let report = gradcheck::run(&GradcheckConfig {
        seed: a.seed,
        trials: a.trials,
        fault: a.inject_conv_fault.then_some(Fault::ConvBackward),
        ..GradcheckConfig::default()
    })?;
    print!("{}", report.to_table());
    let failures: Vec<String> = report
        .failures()
        .map(|r| format!("{} ({}: {:.3e})", r.op, r.worst_tensor, r.worst_relative_error))
        .collect();
    if failures.is_empty() {
        Ok(0)
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failures.join(", ")
        )))
    }
}

fn report(a: ReportArgs) -> Result<i32> {
    let reports = load_run_reports(&a.run)?;
    let out = a.out.unwrap_or_else(|| a.run.clone());
    let mut rows = String::from("section,case_id,region,dice,hausdorff95,dice_both_empty\n");
    for r in &reports {
        for line in r.to_csv().lines().skip(1) {
            rows.push_str(&r.name);
            rows.push(',');
            rows.push_str(line);
            rows.push('\n');
        }
    }
    fsutil::write_atomic(&out.join("report.csv"), rows.as_bytes())?;
    fsutil::write_json(&out.join("report.json"), &reports)?;
    fsutil::write_atomic(&out.join("quantiles.csv"), quantile_csv(&reports).as_bytes())?;
    println!(
        "consolidated {} sections ({}) into {}",
        reports.len(),
        reports.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(", "),
        out.display()
    );
    Ok(0)
}

fn experiment(a: ExperimentArgs) -> Result<i32> {
    let text = String::from_utf8(fsutil::read(&a.config)?)
        .map_err(|_| Error::format("experiment config", format!("{} is not UTF-8", a.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let outcome = run_experiment_with_log(&cfg, &mut |line| eprintln!("{line}"))?;
    print!("{}", outcome.summary.to_csv());
    println!("run directory: {}", outcome.run_dir.display());
    Ok(0)
}
