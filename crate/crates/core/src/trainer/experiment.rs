//! Five-fold experiments and ablation sweeps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::datapipe::augment::AugmentConfig;
use crate::datapipe::folds::{split_folds, FoldPlan, NUM_FOLDS};
use crate::datapipe::image::{ingest_directory, IngestOptions, LabeledImage};
use crate::datapipe::synth::{synth_generate, SynthSpec};
use crate::error::{Error, Result};
use crate::fgd::VariantRegistry;
use crate::trainer::metrics::{average, MetricSummary, METRIC_NAMES};
use crate::trainer::train::{train_fold, FoldData, FoldOutputs, FoldResults, Hyperparams, SplitResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth { spec: SynthSpec, seed: u64 },
    Directory { root: PathBuf, normalize_to: Option<(u32, u32)> },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<LabeledImage>> {
        match self {
            DataSource::Synth { spec, seed } => synth_generate(spec, *seed),
            DataSource::Directory { root, normalize_to } => {
                let ingested = ingest_directory(root, &IngestOptions { normalize_to: *normalize_to })?;
                Ok(ingested.images)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub variant: String,
    pub model: ModelConfig,
    pub hyperparams: Hyperparams,
    pub augment: AugmentConfig,
    pub data: DataSource,
    pub seed: u64,
    /// Folds trained concurrently.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub train: SplitResult,
    pub validate: SplitResult,
    pub test: Option<SplitResult>,
    /// Relative to the experiment directory.
    pub checkpoint: String,
    pub epoch_log: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub train: MetricSummary,
    pub validate: MetricSummary,
    pub test: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: String,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub model_config: ModelConfig,
    pub augment: AugmentConfig,
    pub data: DataSource,
    pub per_fold: Vec<FoldEntry>,
    pub aggregate: FoldSummary,
}

pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Per-split means over folds.
pub fn aggregate_folds(results: &[FoldResults]) -> Result<FoldSummary> {
    if results.is_empty() {
        return Err(Error::Data("no fold results to aggregate".into()));
    }
    let tests: Vec<_> = results.iter().filter_map(|r| r.test.as_ref().map(|t| t.metrics)).collect();
    Ok(FoldSummary {
        train: average(&results.iter().map(|r| r.train.metrics).collect::<Vec<_>>())?,
        validate: average(&results.iter().map(|r| r.validate.metrics).collect::<Vec<_>>())?,
        test: if tests.is_empty() { None } else { Some(average(&tests)?) },
    })
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_variant(name: &str, model: &ModelConfig) -> Result<()> {
    VariantRegistry::builtin().resolve(name, model)?.validate()
}

fn pick<'a>(by_id: &HashMap<&str, &'a LabeledImage>, ids: &[String]) -> Vec<&'a LabeledImage> {
    ids.iter().map(|id| by_id[id.as_str()]).collect()
}

fn run_one_fold(
    cfg: &ExperimentConfig,
    plan: &FoldPlan,
    by_id: &HashMap<&str, &LabeledImage>,
    k: usize,
    out_dir: &Path,
) -> Result<(FoldResults, FoldEntry)> {
    let seed = fold_seed(cfg.seed, k);
    let model = VariantRegistry::builtin().build(&cfg.variant, &cfg.model, seed, candle_core::DType::F32)?;
    let (train_ids, val_ids) = plan.fold(k);
    let data = FoldData {
        train: pick(by_id, &train_ids),
        val: pick(by_id, &val_ids),
        test: pick(by_id, &plan.test_ids),
    };
    let dir = format!("fold{}", k + 1);
    create_dir(&out_dir.join(&dir))?;
    let checkpoint = format!("{dir}/checkpoint.safetensors");
    let epoch_log = format!("{dir}/epochs.csv");
    let outputs = FoldOutputs {
        checkpoint: Some(out_dir.join(&checkpoint)),
        epoch_log: Some(out_dir.join(&epoch_log)),
    };
    let hp = Hyperparams { seed, ..cfg.hyperparams.clone() };
    log::info!("{}: fold {} of {NUM_FOLDS}", cfg.variant, k + 1);
    let res = train_fold(&model, &data, &hp, &cfg.augment, &outputs)?;
    let entry = FoldEntry {
        fold: k + 1,
        seed,
        best_epoch: res.best_epoch,
        best_val_acc: res.best_val_acc,
        train: res.train.clone(),
        validate: res.validate.clone(),
        test: res.test.clone(),
        checkpoint,
        epoch_log,
    };
    Ok((res, entry))
}

/// Splits the data, trains every fold, and writes `report.json`,
/// `splits.json` and one checkpoint plus epoch log per fold under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    check_variant(&cfg.variant, &cfg.model)?;
    cfg.hyperparams.validate()?;
    cfg.augment.validate()?;
    let images = cfg.data.load()?;
    run_experiment_on(cfg, &images, out_dir)
}

/// As [`run_experiment`], with the images already loaded.
pub fn run_experiment_on(cfg: &ExperimentConfig, images: &[LabeledImage], out_dir: &Path) -> Result<ExperimentReport> {
    check_variant(&cfg.variant, &cfg.model)?;
    create_dir(out_dir)?;
    let items: Vec<_> = images.iter().map(|i| (i.source_id.clone(), i.label)).collect();
    let plan = split_folds(&items, cfg.seed)?;
    write_json(&out_dir.join("splits.json"), &plan)?;
    let by_id: HashMap<&str, &LabeledImage> = images.iter().map(|i| (i.source_id.as_str(), i)).collect();

    let workers = cfg.workers.clamp(1, NUM_FOLDS);
    let mut outcomes: Vec<Option<Result<(FoldResults, FoldEntry)>>> = (0..NUM_FOLDS).map(|_| None).collect();
    if workers == 1 {
        for (k, slot) in outcomes.iter_mut().enumerate() {
            *slot = Some(run_one_fold(cfg, &plan, &by_id, k, out_dir));
        }
    } else {
        for chunk in (0..NUM_FOLDS).collect::<Vec<_>>().chunks(workers) {
            let done: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&k| {
                        let (plan, by_id) = (&plan, &by_id);
                        s.spawn(move || (k, run_one_fold(cfg, plan, by_id, k, out_dir)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
            });
            for (k, r) in done {
                outcomes[k] = Some(r);
            }
        }
    }
    let mut results = Vec::with_capacity(NUM_FOLDS);
    let mut per_fold = Vec::with_capacity(NUM_FOLDS);
    for o in outcomes {
        let (r, e) = o.expect("every fold ran")?;
        results.push(r);
        per_fold.push(e);
    }
    let report = ExperimentReport {
        variant: cfg.variant.clone(),
        seed: cfg.seed,
        hyperparams: cfg.hyperparams.clone(),
        model_config: cfg.model.clone(),
        augment: cfg.augment.clone(),
        data: cfg.data.clone(),
        aggregate: aggregate_folds(&results)?,
        per_fold,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Header `variant,acc,spe,sen,ppv,npv,f1`; values are fold-averaged test
/// metrics in percent, blank when undefined in every fold.
pub fn ablation_csv(reports: &[ExperimentReport]) -> String {
    let mut out = format!("variant,{}\n", METRIC_NAMES.join(","));
    for r in reports {
        let summary = r.aggregate.test.as_ref().unwrap_or(&r.aggregate.validate);
        let cells: Vec<String> = summary
            .mean
            .values()
            .iter()
            .map(|v| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default())
            .collect();
        out.push_str(&format!("{},{}\n", r.variant, cells.join(",")));
    }
    out
}

/// Runs `variants` in order with otherwise identical settings, each into
/// `out_dir/<variant>`, and writes `out_dir/ablation.csv`. Every name is
/// checked before any training starts.
pub fn run_ablation(variants: &[String], base: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ExperimentReport>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to ablate".into()));
    }
    for v in variants {
        check_variant(v, &base.model)?;
    }
    base.hyperparams.validate()?;
    base.augment.validate()?;
    let images = base.data.load()?;
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = ExperimentConfig { variant: v.clone(), ..base.clone() };
        reports.push(run_experiment_on(&cfg, &images, &out_dir.join(v))?);
    }
    let path = out_dir.join(ABLATION_FILE);
    std::fs::write(&path, ablation_csv(&reports)).map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}
