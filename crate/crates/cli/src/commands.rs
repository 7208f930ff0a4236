use std::path::{Path, PathBuf};

use anyhow::Context as _;
use auxloc::eval::{
    self, ablate as run_ablation, export_attention_masks, export_trajectory, evaluate_colorization, evaluate_pose,
    model_seed, summarize_ablation, MetricsReport,
};
use auxloc::image::{read_pnm, write_ppm};
use auxloc::model::load_params;
use auxloc::synthscene::{generate_dataset, load_dataset, Dataset};
use auxloc::trainer::{latest_checkpoint, train as run_training, Normalization, PreparedSplit, TrainOptions, LOG_FILE};
use auxloc::Model64;

use crate::config::RunConfig;
use crate::UsageError;

pub const CONFIG_FILE: &str = "config.txt";
pub const NORM_FILE: &str = "norm.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const MASK_DIR: &str = "masks";
pub const ABLATION_FILE: &str = "ablation.csv";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_out(cfg: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    cfg.out()
        .ok_or_else(|| usage(format!("{command} needs an output directory (--out or out=)")))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Refuses a non-empty `dir` unless `force`; with `force`, deletes only the
/// listed entries so a mistyped path cannot wipe unrelated files.
fn prepare_out(dir: &Path, force: bool, owned: impl Fn(&str) -> bool) -> anyhow::Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return Err(usage(format!(
                "{} is not empty; pass --force to replace its contents",
                dir.display()
            )));
        }
        for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !owned(name) {
                continue;
            }
            if path.is_dir() {
                std::fs::remove_dir_all(&path)
            } else {
                std::fs::remove_file(&path)
            }
            .with_context(|| format!("removing {}", path.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let out = require_out(cfg, "gen-data")?;
    let spec = cfg.dataset_spec()?;
    prepare_out(&out, force, |n| {
        n == "images" || n == "manifest.txt" || (n.starts_with("poses_") && n.ends_with(".csv"))
    })?;
    let m = generate_dataset(&out, &spec)?;
    println!(
        "dataset {}: seed {}, extent {}, {} objects, {}x{}, {} train / {} test",
        out.display(),
        m.seed,
        m.extent,
        m.num_objects,
        m.width,
        m.height,
        m.n_train,
        m.n_test
    );
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let dir = cfg.data_dir();
    load_dataset(&dir).with_context(|| format!("cannot load dataset at {}", dir.display()))
}

fn is_training_artifact(name: &str) -> bool {
    name == LOG_FILE
        || name == CONFIG_FILE
        || name == NORM_FILE
        || (name.starts_with("ckpt_") && (name.ends_with(".axps") || name.ends_with(".adam")))
}

pub fn train(cfg: &RunConfig, force: bool, resume: bool) -> anyhow::Result<()> {
    let out = require_out(cfg, "train")?;
    let ds = open_dataset(cfg)?;
    let model_cfg = cfg.model(ds.manifest.width, ds.manifest.height)?;
    let train_cfg = cfg.train()?;
    if resume {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    } else {
        prepare_out(&out, force, is_training_artifact)?;
    }
    let norm = Normalization::compute(ds.train.iter().map(|s| &s.image))?;
    let norm_path = out.join(NORM_FILE);
    if resume && norm_path.exists() && Normalization::load(&norm_path)? != norm {
        return Err(usage(format!("{} does not match the dataset", norm_path.display())));
    }
    norm.save(&norm_path)?;
    let mut saved = cfg.clone();
    saved.set("data.width", ds.manifest.width.to_string())?;
    saved.set("data.height", ds.manifest.height.to_string())?;
    std::fs::write(out.join(CONFIG_FILE), saved.to_text()).context("writing resolved config")?;
    let data: PreparedSplit<f64> = PreparedSplit::new(&ds.train, &norm)?;
    let mut model = Model64::new(model_cfg, model_seed(train_cfg.seed))?;
    let log = run_training(
        &mut model,
        &data,
        &train_cfg,
        TrainOptions {
            out_dir: Some(&out),
            resume,
            ..TrainOptions::default()
        },
    )?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!(
            "trained {} epochs: joint loss {:.4} -> {:.4}, train median {:.4} / {:.3} deg",
            log.records.len(),
            first.loss_joint,
            last.loss_joint,
            last.median_t_err,
            last.median_r_err_deg
        );
    }
    Ok(())
}

/// A file is used as is; a directory means its latest checkpoint.
pub fn resolve_checkpoint(path: &Path) -> anyhow::Result<PathBuf> {
    if path.is_dir() {
        return latest_checkpoint(path)?
            .map(|(_, p)| p)
            .ok_or_else(|| anyhow::anyhow!("no ckpt_NNNN.axps in {}", path.display()));
    }
    if !path.exists() {
        anyhow::bail!("checkpoint {} does not exist", path.display());
    }
    Ok(path.to_owned())
}

/// The resolved config saved next to a checkpoint, if any.
pub fn saved_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(CONFIG_FILE);
    p.exists().then_some(p)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, width: usize, height: usize) -> anyhow::Result<Model64> {
    let mut model = Model64::new(cfg.model(width, height)?, 0)?;
    let params = load_params(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    model
        .load_params(params)
        .with_context(|| format!("{} does not fit the configured model", checkpoint.display()))?;
    Ok(model)
}

fn load_norm(checkpoint: &Path) -> anyhow::Result<Normalization> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(NORM_FILE);
    Normalization::load(&path).with_context(|| format!("normalization statistics {}", path.display()))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, force: bool, export_masks: bool) -> anyhow::Result<()> {
    let out = require_out(cfg, "eval")?;
    let ds = open_dataset(cfg)?;
    let model = load_model(cfg, checkpoint, ds.manifest.width, ds.manifest.height)?;
    if export_masks && !model.config().use_attention {
        return Err(usage("--export-masks needs an attention-enabled model"));
    }
    let thresholds = cfg.thresholds()?;
    prepare_out(&out, force, |n| n == METRICS_FILE || n == TRAJECTORY_FILE || n == MASK_DIR)?;
    let norm = load_norm(checkpoint)?;
    let split: PreparedSplit<f64> = PreparedSplit::new(ds.split(cfg.eval_split()?), &norm)?;
    let pose = evaluate_pose(&model, &split)?;
    let mut report = MetricsReport::from_pose(&pose);
    if model.config().use_auxiliary {
        report.colorization_acc = evaluate_colorization(&model, &split, &thresholds)?;
    }
    report.write(&out.join(METRICS_FILE))?;
    export_trajectory(&model, &split, &out.join(TRAJECTORY_FILE))?;
    if export_masks {
        let k = cfg.mask_count()?.min(split.len());
        let positions: Vec<usize> = (0..k).map(|i| i * split.len() / k.max(1)).collect();
        export_attention_masks(&model, &split, &positions, &out.join(MASK_DIR))?;
    }
    println!(
        "median translation error {:.6}, median rotation error {:.4} deg",
        report.median_t_err, report.median_r_err_deg
    );
    for (t, f) in &report.colorization_acc {
        println!("colorization accuracy@{t}: {f:.4}");
    }
    Ok(())
}

pub fn colorize(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    output: Option<&Path>,
    force: bool,
) -> anyhow::Result<()> {
    let input = read_pnm::<f64>(image).with_context(|| format!("reading {}", image.display()))?;
    let out_path = match output {
        Some(p) => p.to_owned(),
        None => {
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            require_out(cfg, "colorize without --output")?.join(format!("{stem}_color.ppm"))
        }
    };
    if out_path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to replace it", out_path.display())));
    }
    // the colorizer is fully convolutional; only the pose head is size bound
    let width: usize = cfg.get("data.width").parse().unwrap_or(input.width());
    let height: usize = cfg.get("data.height").parse().unwrap_or(input.height());
    let model = load_model(cfg, checkpoint, width, height)?;
    if !model.config().use_auxiliary {
        return Err(usage("colorize needs a model trained with the colorization branch"));
    }
    let result = eval::colorize(&model, &input)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_ppm(&out_path, &result)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn ablate(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let out = require_out(cfg, "ablate")?;
    let ds = open_dataset(cfg)?;
    let seeds = cfg.ablation_seeds()?;
    let model_cfg = cfg.model(ds.manifest.width, ds.manifest.height)?;
    let train_cfg = cfg.train()?;
    let threshold = cfg.threshold_fraction()? * ds.manifest.extent;
    prepare_out(&out, force, |n| n == ABLATION_FILE)?;
    let norm = Normalization::compute(ds.train.iter().map(|s| &s.image))?;
    let train_split: PreparedSplit<f64> = PreparedSplit::new(&ds.train, &norm)?;
    let test_split: PreparedSplit<f64> = PreparedSplit::new(&ds.test, &norm)?;
    let rows = run_ablation(
        &train_split,
        &test_split,
        &model_cfg,
        &train_cfg,
        &seeds,
        threshold,
        Some(&out.join(ABLATION_FILE)),
    )?;
    println!("{:<22} {:>5} {:>7} {:>12} {:>14}", "config", "runs", "failed", "median_t", "median_r_deg");
    for s in summarize_ablation(&rows) {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
        println!(
            "{:<22} {:>5} {:>7} {:>12} {:>14}",
            s.config,
            s.runs,
            s.failed,
            f(s.median_t),
            f(s.median_r_deg)
        );
    }
    Ok(())
}
