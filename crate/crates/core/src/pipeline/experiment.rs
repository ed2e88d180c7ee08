//! Cross-validated multi-view experiments driven by a TOML config.
//!
//! Every artifact goes under `<output_dir>/run-<hash>`, where the hash is
//! taken over the resolved config (minus `output_dir`):
//!
//! ```text
//! config.toml                 resolved config echo
//! checkpoints/<view>-fold<k>.uckp
//! curves/<view>-fold<k>.csv   epoch,train_loss,validation_wt_dice
//! reports/<section>.{json,csv}
//! summary.{json,csv}          one row per section
//! quantiles.csv               box-plot quantiles per section
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::inference::{fuse_views, predict_volume, ProbabilityVolume};
use super::train::{fold_cases, train_with_progress, TrainConfig};
use crate::error::{Error, Result};
use crate::fsutil::{self, LockFile};
use crate::loss::LossConfig;
use crate::metrics::{evaluate_cases, quantile_table, MetricsConfig, MetricsReport, QUANTILE_CSV_HEADER};
use crate::model::checkpoint::{Checkpoint, EpochRecord};
use crate::model::NetworkSpec;
use crate::volume::{
    generate_phantom, mvol, preprocess, Case, Dims, Grade, IdentityCorrection, PreprocessConfig, SubRegion, View,
};

/// HGG share of the BRATS 2018 training set (210 of 285 cases).
pub const DEFAULT_HGG_FRACTION: f64 = 210.0 / 285.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomBlock {
    pub cases: usize,
    pub dims: Dims,
    pub hgg_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomBlock {
    fn default() -> Self {
        Self {
            cases: 12,
            dims: [64, 64, 64],
            hgg_fraction: DEFAULT_HGG_FRACTION,
            seed: 0,
        }
    }
}

/// Training hyper-parameters shared by every (view, fold) job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub oversample: usize,
    pub validation_interval: usize,
    pub augment: bool,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: t.seed,
            oversample: t.oversample,
            validation_interval: t.validation_interval,
            augment: t.augment,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Train,
    /// Reuse checkpoints already present in the run directory.
    EvaluateOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// MVOL dataset directory; when absent the phantom block is used.
    pub dataset: Option<PathBuf>,
    pub phantom: PhantomBlock,
    pub views: Vec<View>,
    pub folds: usize,
    pub split_seed: u64,
    pub mode: RunMode,
    pub network: NetworkSpec,
    pub loss: LossConfig,
    pub train: TrainBlock,
    /// Per-view replacements for `train`, keyed by view name.
    pub per_view: BTreeMap<View, TrainBlock>,
    pub preprocess: PreprocessConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            dataset: None,
            phantom: PhantomBlock::default(),
            views: View::ALL.to_vec(),
            folds: 5,
            split_seed: 0,
            mode: RunMode::Train,
            network: NetworkSpec::default(),
            loss: LossConfig::default(),
            train: TrainBlock::default(),
            per_view: BTreeMap::new(),
            preprocess: PreprocessConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("experiment config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("experiment config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::InvalidArgument("experiment needs at least one view".into()));
        }
        let mut seen = self.views.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.views.len() {
            return Err(Error::InvalidArgument("views must be distinct".into()));
        }
        if self.folds == 0 {
            return Err(Error::InvalidArgument("folds must be >= 1".into()));
        }
        if self.dataset.is_none() && self.phantom.cases < self.folds {
            return Err(Error::InvalidArgument(format!(
                "{} phantom cases cannot fill {} folds",
                self.phantom.cases, self.folds
            )));
        }
        for view in &self.views {
            self.train_config(*view, 0)?.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self, view: View, fold: usize) -> Result<TrainConfig> {
        let t = self.per_view.get(&view).unwrap_or(&self.train);
        Ok(TrainConfig {
            view,
            fold,
            folds: self.folds,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            loss: self.loss,
            network: self.network.clone(),
            seed: t.seed,
            split_seed: self.split_seed,
            oversample: t.oversample,
            validation_interval: t.validation_interval,
            augment: t.augment,
        })
    }

    /// First 12 hex digits of SHA-256 over the config (without `output_dir`).
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(serde_json::to_vec(&value)?);
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(format!("run-{}", self.hash()?)))
    }
}

/// `n` phantom cases with ids `phantom-000…`; the first
/// `round(n · hgg_fraction)` are high-grade.
pub fn synthesize_cases(n: usize, dims: Dims, hgg_fraction: f64, seed: u64) -> Result<Vec<Case>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one case".into()));
    }
    if !(0.0..=1.0).contains(&hgg_fraction) {
        return Err(Error::InvalidArgument(format!(
            "hgg fraction must lie in [0, 1], got {hgg_fraction}"
        )));
    }
    let hgg = (n as f64 * hgg_fraction).round() as usize;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let grade = if i < hgg { Grade::Hgg } else { Grade::Lgg };
            let case_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            let (mut volume, labels) = generate_phantom(case_seed, dims, grade)?;
            volume.case_id = format!("phantom-{i:03}");
            Ok(Case { volume, labels, grade })
        })
        .collect()
}

pub fn preprocess_cases(cases: Vec<Case>, cfg: &PreprocessConfig) -> Result<Vec<Case>> {
    cases
        .into_par_iter()
        .map(|c| {
            Ok(Case {
                volume: preprocess(&c.volume, cfg, &IdentityCorrection)?,
                ..c
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionSummary {
    pub name: String,
    pub description: String,
    pub dice: BTreeMap<SubRegion, f64>,
    /// Mean over cases with a defined distance.
    pub hausdorff95: BTreeMap<SubRegion, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub sections: Vec<SectionSummary>,
}

pub const SUMMARY_CSV_HEADER: &str = "section,dice_et,dice_wt,dice_tc,hd95_et,hd95_wt,hd95_tc";

const REGION_ORDER: [SubRegion; 3] = [SubRegion::EnhancingTumor, SubRegion::WholeTumor, SubRegion::TumorCore];

impl ExperimentSummary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for s in &self.sections {
            let dice: Vec<String> = REGION_ORDER.iter().map(|r| s.dice[r].to_string()).collect();
            let hd: Vec<String> = REGION_ORDER
                .iter()
                .map(|r| s.hausdorff95[r].map_or("undefined".into(), |v| v.to_string()))
                .collect();
            let _ = writeln!(out, "{},{},{}", s.name, dice.join(","), hd.join(","));
        }
        out
    }
}

/// One trained (or loaded) model.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub view: View,
    pub fold: usize,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
    pub summary: ExperimentSummary,
    pub models: Vec<TrainedModel>,
}

impl ExperimentOutcome {
    pub fn report(&self, name: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

fn checkpoint_path(run_dir: &Path, view: View, fold: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{view}-fold{fold}.uckp"))
}

fn curve_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,validation_wt_dice\n");
    for r in history {
        let dice = r.validation_wt_dice.map_or(String::new(), |d| d.to_string());
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, dice);
    }
    out
}

fn load_cases(cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    let raw = match &cfg.dataset {
        Some(dir) => mvol::load_dataset(dir)?,
        None => synthesize_cases(
            cfg.phantom.cases,
            cfg.phantom.dims,
            cfg.phantom.hgg_fraction,
            cfg.phantom.seed,
        )?,
    };
    preprocess_cases(raw, &cfg.preprocess)
}

/// Out-of-fold probability volumes of one view, keyed by case id.
fn predict_view(
    models: &[TrainedModel],
    cases: &[Case],
    cfg: &ExperimentConfig,
    view: View,
) -> Result<BTreeMap<String, ProbabilityVolume>> {
    let mut out = BTreeMap::new();
    for fold in 0..cfg.folds {
        let ckpts: Vec<Checkpoint> = models
            .iter()
            .filter(|m| m.view == view && m.fold == fold)
            .map(|m| m.checkpoint.clone())
            .collect();
        let (train, validation) = fold_cases(cases, cfg.folds, fold, cfg.split_seed)?;
        // A single fold has no held-out cases; it is evaluated on its
        // training cases.
        let targets = if cfg.folds == 1 { train } else { validation };
        let predicted: Vec<ProbabilityVolume> = targets
            .par_iter()
            .map(|c| predict_volume(&ckpts, &c.volume, view))
            .collect::<Result<_>>()?;
        for p in predicted {
            out.insert(p.case_id.clone(), p);
        }
    }
    Ok(out)
}

fn section_report(
    name: &str,
    labels: &BTreeMap<String, crate::volume::LabelVolume>,
    cases: &[Case],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let triples: Vec<(String, &crate::volume::LabelVolume, &crate::volume::LabelVolume)> = cases
        .iter()
        .filter_map(|c| labels.get(c.id()).map(|p| (c.id().to_string(), p, &c.labels)))
        .collect();
    Ok(MetricsReport::new(name, cfg.clone(), evaluate_cases(&triples, cfg)?))
}

fn describe(name: &str, folds: usize) -> String {
    match name {
        "fused" => "multi-view fusion of the axial and coronal ensembles".into(),
        view if folds == 1 => format!("{view} view, single model evaluated on its training cases"),
        view => format!("{view} view, {folds}-fold cross-validation (out-of-fold predictions)"),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with_log(cfg, &mut |_| {})
}

/// Trains (or loads) every (view, fold) model, predicts each case with the
/// models that did not see it, fuses the views and writes all reports.
pub fn run_experiment_with_log(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let run_dir = cfg.run_dir()?;
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let _lock = LockFile::acquire(&run_dir.join(".lock"))?;
    fsutil::write_atomic(&run_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    log(&format!("run directory {}", run_dir.display()));

    if cfg.mode == RunMode::EvaluateOnly {
        let missing: Vec<String> = cfg
            .views
            .iter()
            .flat_map(|&v| (0..cfg.folds).map(move |f| (v, f)))
            .map(|(v, f)| checkpoint_path(&run_dir, v, f))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "missing checkpoints: {}",
                missing.join(", ")
            )));
        }
    }
    let cases = load_cases(cfg)?;
    log(&format!("{} cases loaded", cases.len()));

    let mut models = Vec::new();
    for &view in &cfg.views {
        for fold in 0..cfg.folds {
            let path = checkpoint_path(&run_dir, view, fold);
            let checkpoint = match cfg.mode {
                RunMode::EvaluateOnly => Checkpoint::load(&path)?,
                RunMode::Train => {
                    let tc = cfg.train_config(view, fold)?;
                    let started = std::time::Instant::now();
                    let ckpt = train_with_progress(&tc, &cases, &mut |r| {
                        let dice = r
                            .validation_wt_dice
                            .map_or(String::new(), |d| format!(", validation WT dice {d:.4}"));
                        log(&format!(
                            "{view} fold {fold} epoch {}: loss {:.5}{dice}",
                            r.epoch, r.train_loss
                        ));
                    })?;
                    log(&format!(
                        "{view} fold {fold} trained in {:.1}s",
                        started.elapsed().as_secs_f64()
                    ));
                    ckpt.save(&path)?;
                    ckpt
                }
            };
            let curve = run_dir.join("curves").join(format!("{view}-fold{fold}.csv"));
            fsutil::write_atomic(&curve, curve_csv(&checkpoint.meta.history).as_bytes())?;
            models.push(TrainedModel { view, fold, checkpoint });
        }
    }

    let mut per_view = BTreeMap::new();
    let mut reports = Vec::new();
    for &view in &cfg.views {
        let probs = predict_view(&models, &cases, cfg, view)?;
        let labels = probs
            .iter()
            .map(|(id, p)| Ok((id.clone(), p.to_labels()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        reports.push(section_report(view.name(), &labels, &cases, &cfg.metrics)?);
        per_view.insert(view, probs);
    }
    if let (Some(axial), Some(coronal)) = (per_view.get(&View::Axial), per_view.get(&View::Coronal)) {
        let labels = axial
            .iter()
            .map(|(id, a)| {
                let c = coronal
                    .get(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no coronal prediction for {id}")))?;
                Ok((id.clone(), fuse_views(a, c)?.1))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        reports.push(section_report("fused", &labels, &cases, &cfg.metrics)?);
    }

    for r in &reports {
        fsutil::write_atomic(
            &run_dir.join("reports").join(format!("{}.json", r.name)),
            r.to_json()?.as_bytes(),
        )?;
        fsutil::write_atomic(
            &run_dir.join("reports").join(format!("{}.csv", r.name)),
            r.to_csv().as_bytes(),
        )?;
    }
    let summary = ExperimentSummary {
        config_hash: hash,
        sections: reports
            .iter()
            .map(|r| SectionSummary {
                name: r.name.clone(),
                description: describe(&r.name, cfg.folds),
                dice: SubRegion::ALL
                    .iter()
                    .map(|&s| (s, r.mean_dice(s).unwrap_or(f64::NAN)))
                    .collect(),
                hausdorff95: SubRegion::ALL.iter().map(|&s| (s, r.mean_hausdorff(s))).collect(),
            })
            .collect(),
    };
    fsutil::write_json(&run_dir.join("summary.json"), &summary)?;
    fsutil::write_atomic(&run_dir.join("summary.csv"), summary.to_csv().as_bytes())?;
    fsutil::write_atomic(&run_dir.join("quantiles.csv"), quantile_csv(&reports).as_bytes())?;
    for s in &summary.sections {
        log(&format!(
            "{}: dice ET/WT/TC {:.4}/{:.4}/{:.4}",
            s.name,
            s.dice[&SubRegion::EnhancingTumor],
            s.dice[&SubRegion::WholeTumor],
            s.dice[&SubRegion::TumorCore]
        ));
    }
    Ok(ExperimentOutcome {
        run_dir,
        reports,
        summary,
        models,
    })
}

pub fn quantile_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{QUANTILE_CSV_HEADER}\n");
    for row in quantile_table(reports) {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Reads the per-section JSON reports of a finished run directory.
pub fn load_run_reports(run_dir: &Path) -> Result<Vec<MetricsReport>> {
    let summary: ExperimentSummary = fsutil::read_json(&run_dir.join("summary.json"))?;
    if summary.sections.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} lists no report sections",
            run_dir.display()
        )));
    }
    summary
        .sections
        .iter()
        .map(|s| {
            let path = run_dir.join("reports").join(format!("{}.json", s.name));
            let text = String::from_utf8(fsutil::read(&path)?)
                .map_err(|_| Error::format("metrics report", format!("{} is not UTF-8", path.display())))?;
            MetricsReport::from_json(&text)
        })
        .collect()
}
