//! `msht`: synthetic data, k-fold training, evaluation, Grad-CAM export and
//! ablation sweeps.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! when a run fails. Every file is written below the `--out` directory.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msht::datapipe::{
    dataset_id, ingest_directory, read_manifest, split_folds, synth_generate, write_image_dataset, IngestOptions, LabeledImage,
};
use msht::explain::{grad_cam_image, overlay, save_png, CamOptions};
use msht::fgd::VariantRegistry;
use msht::trainer::{compute_metrics, evaluate, run_ablation, run_experiment, ABLATION_FILE};
use msht::{Model, ParameterArchive};

use crate::settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "msht", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives every output file.
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Folds trained concurrently.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        edge: Option<u32>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        blobs: Option<usize>,
    },
    /// Five-fold training of one variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        /// Image directory with `positive/` and `negative/` subdirectories.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on a dataset directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to a manifest split: `test` or a fold number.
        #[arg(long)]
        split: Option<String>,
    },
    /// Grad-CAM overlays for selected images.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated image ids such as `positive/synth_00000`.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        /// 0 = positive, 1 = negative.
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Backbone stage 1-4; defaults to the deepest stage in use.
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
    },
    /// Trains every listed variant and writes a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<msht::Error> for Failure {
    fn from(e: msht::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_settings(common: &Common) -> Result<Settings, Failure> {
    let mut s = match &common.config {
        Some(p) => Settings::from_file(p).map_err(usage)?,
        None => Settings::default(),
    };
    s.apply_overrides(&common.overrides).map_err(usage)?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(w) = common.workers {
        s.workers = w;
    }
    Ok(s)
}

fn create_out(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: String) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn check_variant(name: &str, s: &Settings) -> Outcome {
    let model = s.model_config().map_err(usage)?;
    VariantRegistry::builtin()
        .resolve(name, &model)
        .and_then(|c| c.validate())
        .map_err(usage)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    let archive = ParameterArchive::load(path)?;
    Ok(Model::from_checkpoint(&archive, candle_core::DType::F32)?)
}

fn load_images(data: &Path, s: &Settings) -> Result<Vec<LabeledImage>, Failure> {
    Ok(ingest_directory(data, &IngestOptions { normalize_to: s.normalize })?.images)
}

fn synth(common: &Common, edge: Option<u32>, per_class: Option<usize>, blobs: Option<usize>) -> Outcome {
    let mut s = load_settings(common)?;
    if let Some(e) = edge {
        s.synth_edge = Some(e);
    }
    if let Some(n) = per_class {
        s.synth_per_class = n;
    }
    if let Some(b) = blobs {
        s.synth_blobs = b;
    }
    let model = s.model_config().map_err(usage)?;
    let spec = s.synth_spec(&model);
    let images = synth_generate(&spec, s.synth_seed.unwrap_or(s.seed)).map_err(usage)?;
    let items: Vec<_> = images.iter().map(|i| (dataset_id(i), i.label)).collect();
    let plan = split_folds(&items, s.seed).ok();
    create_out(&common.out)?;
    let rows = write_image_dataset(&common.out, &images, plan.as_ref())?;
    println!("wrote {} images to {}", rows.len(), common.out.display());
    Ok(())
}

fn train(common: &Common, variant: Option<String>, data: Option<PathBuf>) -> Outcome {
    let mut s = load_settings(common)?;
    if let Some(v) = variant {
        s.variant = v;
    }
    if data.is_some() {
        s.data_root = data;
    }
    check_variant(&s.variant, &s)?;
    let cfg = s.experiment(&s.variant).map_err(usage)?;
    create_out(&common.out)?;
    let report = run_experiment(&cfg, &common.out)?;
    let test = report.aggregate.test.as_ref().unwrap_or(&report.aggregate.validate);
    println!("{}: mean test metrics {}", report.variant, serde_json::to_string(&test.mean).unwrap_or_default());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, data: &Path, split: Option<&str>) -> Outcome {
    let s = load_settings(common)?;
    let model = load_model(checkpoint)?;
    let mut images = load_images(data, &s)?;
    if let Some(split) = split {
        let rows = read_manifest(&data.join("manifest.csv"))?;
        let keep: std::collections::HashSet<String> =
            rows.into_iter().filter(|r| r.fold == split).map(|r| r.id).collect();
        images.retain(|i| keep.contains(&i.source_id));
        if images.is_empty() {
            return Err(usage(format!("no images in split {split:?}")));
        }
    }
    let aug = s.augment_config(model.config());
    let refs: Vec<&LabeledImage> = images.iter().collect();
    let counts = evaluate(&model, &refs, &aug, s.hyperparams.batch_size)?;
    let metrics = compute_metrics(&counts)?;
    let json = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "variant": model.variant(),
        "split": split.unwrap_or("all"),
        "samples": counts.total(),
        "counts": counts,
        "metrics": metrics,
    });
    create_out(&common.out)?;
    let text = serde_json::to_string_pretty(&json).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
    println!("{text}");
    write_text(&common.out.join("metrics.json"), text)
}

struct CamArgs<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    ids: &'a [String],
    class: usize,
    stage: Option<usize>,
    alpha: f32,
}

fn cam(common: &Common, a: CamArgs<'_>) -> Outcome {
    let s = load_settings(common)?;
    if matches!(a.stage, Some(st) if !(1..=4).contains(&st)) {
        return Err(usage("--stage must be between 1 and 4"));
    }
    let model = load_model(a.checkpoint)?;
    let images = load_images(a.data, &s)?;
    let aug = s.augment_config(model.config());
    let opts = CamOptions {
        stage: a.stage.map(|st| st - 1),
        ..Default::default()
    };
    create_out(&common.out)?;
    for id in a.ids {
        let img = images
            .iter()
            .find(|i| &i.source_id == id)
            .ok_or_else(|| usage(format!("no image with id {id:?} under {}", a.data.display())))?;
        let heat = grad_cam_image(&model, img, &aug, a.class, &opts)?;
        let pixels = msht::datapipe::eval_image(&img.pixels, &aug)?;
        let stem = id.replace('/', "_");
        save_png(&overlay(&heat, &pixels, a.alpha)?, &common.out.join(format!("{stem}.png")))?;
        heat.write_sidecar(&common.out.join(format!("{stem}.json")))?;
        println!("{id}: {}", common.out.join(format!("{stem}.png")).display());
    }
    Ok(())
}

fn ablate(common: &Common) -> Outcome {
    let s = load_settings(common)?;
    for v in &s.variants {
        check_variant(v, &s)?;
    }
    let cfg = s.experiment(&s.variants[0]).map_err(usage)?;
    create_out(&common.out)?;
    run_ablation(&s.variants, &cfg, &common.out)?;
    let table = std::fs::read_to_string(common.out.join(ABLATION_FILE)).unwrap_or_default();
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Synth {
            common,
            edge,
            per_class,
            blobs,
        } => synth(common, *edge, *per_class, *blobs),
        Command::Train { common, variant, data } => train(common, variant.clone(), data.clone()),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => eval(common, checkpoint, data, split.as_deref()),
        Command::Cam {
            common,
            checkpoint,
            data,
            ids,
            class,
            stage,
            alpha,
        } => cam(
            common,
            CamArgs {
                checkpoint,
                data,
                ids,
                class: *class,
                stage: *stage,
                alpha: *alpha,
            },
        ),
        Command::Ablate { common } => ablate(common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
