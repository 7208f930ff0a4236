//! Median pose errors, colorization accuracy, attention-mask and trajectory
//! exports, the metrics report and the three-level ablation protocol.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::colorspace::{denormalize_lab, gamut_map_chroma, lab_to_rgb, normalize_lab_for_net, rgb_to_lab, AB_SCALE};
use crate::error::{Error, Result};
use crate::image::{write_gray_ppm, write_ppm, RgbImage};
use crate::model::{Model, ModelConfig};
use crate::posemath::{quat_exp, rotation_error_deg, translation_error, LogRotation, Pose};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::synthscene::pose_fields;
use crate::tensor::Tape;
use crate::trainer::{train, PreparedSplit, TrainConfig, TrainOptions};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [5.0, 10.0];
const EVAL_BATCH: usize = 10;

/// Lower-middle order statistic: `sorted[(n - 1) / 2]`. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEvaluation {
    pub predictions: Vec<Pose<f64>>,
    pub translation_errors: Vec<f64>,
    pub rotation_errors_deg: Vec<f64>,
    pub median_t_err: f64,
    pub median_r_err_deg: f64,
}

/// Per-sample errors and medians of `predicted` against `truth`.
pub fn pose_errors(predicted: &[Pose<f64>], truth: &[Pose<f64>]) -> Result<PoseEvaluation> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "need equally many non-zero predictions and ground truths, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let translation_errors: Vec<f64> = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| translation_error(p.translation(), t.translation()))
        .collect();
    let rotation_errors_deg: Vec<f64> = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| rotation_error_deg(p.rotation(), t.rotation()))
        .collect();
    Ok(PoseEvaluation {
        predictions: predicted.to_vec(),
        median_t_err: median(&translation_errors).expect("non-empty"),
        median_r_err_deg: median(&rotation_errors_deg).expect("non-empty"),
        translation_errors,
        rotation_errors_deg,
    })
}

/// Turns a translation row and a log-rotation row into a pose.
pub fn decode_pose<T: Scalar>(translation: &[T], log_rotation: &[T]) -> Result<Pose<f64>> {
    let f = |v: &[T]| [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()];
    Pose::new(f(translation), quat_exp(LogRotation(f(log_rotation))))
}

/// Predicted poses for the listed positions of `split`.
pub fn predict_poses<T: Scalar>(
    model: &Model<T>,
    split: &PreparedSplit<T>,
    positions: &[usize],
    batch_size: usize,
) -> Result<Vec<Pose<f64>>> {
    let mut out = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let inf = model.infer(&split.batch(chunk)?)?;
        for k in 0..chunk.len() {
            out.push(decode_pose(
                &inf.translation.data()[3 * k..3 * k + 3],
                &inf.log_rotation.data()[3 * k..3 * k + 3],
            )?);
        }
    }
    Ok(out)
}

pub fn evaluate_pose_at<T: Scalar>(
    model: &Model<T>,
    split: &PreparedSplit<T>,
    positions: &[usize],
    batch_size: usize,
) -> Result<PoseEvaluation> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let predicted = predict_poses(model, split, positions, batch_size)?;
    let truth: Vec<Pose<f64>> = positions.iter().map(|&i| split.poses[i]).collect();
    pose_errors(&predicted, &truth)
}

pub fn evaluate_pose<T: Scalar>(model: &Model<T>, split: &PreparedSplit<T>) -> Result<PoseEvaluation> {
    let all: Vec<usize> = (0..split.len()).collect();
    evaluate_pose_at(model, split, &all, EVAL_BATCH)
}

/// Fraction of `distances` strictly below each threshold.
pub fn accuracy_at(distances: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let hits = distances.iter().filter(|&&d| d < t).count();
            (t, hits as f64 / distances.len().max(1) as f64)
        })
        .collect()
}

/// Per-pixel Euclidean `(a,b)` distances in Lab units between predicted and
/// true chroma over the whole split.
pub fn chroma_distances<T: Scalar>(model: &Model<T>, split: &PreparedSplit<T>) -> Result<Vec<f64>> {
    if !model.config().use_auxiliary {
        return Err(Error::InvalidArgument("model has no colorization branch".into()));
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let all: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::new();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = split.batch(chunk)?;
        let pred = model.infer(&batch)?.pred_ab.expect("auxiliary model predicts chroma");
        let [b, _, h, w] = pred.dims4()?;
        let plane = h * w;
        for bi in 0..b {
            let base = bi * 2 * plane;
            for i in 0..plane {
                let da = (pred.data()[base + i] - batch.ab.data()[base + i]).to_f64_lossy();
                let db = (pred.data()[base + plane + i] - batch.ab.data()[base + plane + i]).to_f64_lossy();
                out.push(AB_SCALE * da.hypot(db));
            }
        }
    }
    Ok(out)
}

/// Accuracy at each threshold (Lab units) over every pixel of the split.
pub fn evaluate_colorization<T: Scalar>(
    model: &Model<T>,
    split: &PreparedSplit<T>,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    Ok(accuracy_at(&chroma_distances(model, split)?, thresholds))
}

/// Keeps the lightness of `image`, replaces its chroma with the colorizer's
/// prediction and converts back to sRGB. Out-of-gamut predictions lose
/// chroma rather than lightness. Extents must be multiples of 16.
pub fn colorize<T: Scalar>(model: &Model<T>, image: &RgbImage<f64>) -> Result<RgbImage<f64>> {
    if !model.config().use_auxiliary {
        return Err(Error::InvalidArgument("model has no colorization branch".into()));
    }
    let (w, h) = (image.width(), image.height());
    let stride = crate::model::FEATURE_STRIDE;
    if w == 0 || h == 0 || w % stride != 0 || h % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "image extents must be positive multiples of {stride}, got {w}x{h}"
        )));
    }
    let resized;
    let model = if (model.config().input_width, model.config().input_height) == (w, h) {
        model
    } else {
        // colorizer weights do not depend on the image size; the pose head does
        let cfg = ModelConfig {
            input_width: w,
            input_height: h,
            ..model.config().clone()
        };
        let mut m = Model::new(cfg, 0)?;
        for (k, v) in model.params().iter().filter(|(k, _)| k.starts_with("colorizer.")) {
            m.params_mut()[k.as_str()] = v.clone();
        }
        resized = m;
        &resized
    };
    let (x_l, _) = normalize_lab_for_net(&rgb_to_lab(image)?);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let input = tape.constant(x_l.cast::<T>().reshape(&[1, 1, h, w])?);
    let (pred, _) = model.colorizer_forward(&mut tape, &p, input)?;
    let pred: crate::tensor::Tensor<f64> = tape.value(pred).cast().reshape(&[2, h, w])?;
    let mut lab = denormalize_lab(&x_l, &pred)?;
    for i in 0..w * h {
        let [l, a, b] = gamut_map_chroma([lab.l[i], lab.a[i], lab.b[i]]);
        (lab.l[i], lab.a[i], lab.b[i]) = (l, a, b);
    }
    Ok(lab_to_rgb(&lab))
}

/// Min-max normalization to `[0,1]`; a constant map becomes all `0.5`.
pub fn normalize_mask(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Writes `mask_{index:06}.ppm` (feature-map resolution, min-max
/// normalized gray) and `input_{index:06}.ppm` for each listed position.
pub fn export_attention_masks<T: Scalar>(
    model: &Model<T>,
    split: &PreparedSplit<T>,
    positions: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !model.config().use_attention {
        return Err(Error::InvalidArgument("model has no attention module".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for &pos in positions {
        let inf = model.infer(&split.batch(&[pos])?)?;
        let mask = inf.attention_mask.expect("attention model produces a mask");
        let [_, _, h, w] = mask.dims4()?;
        let values: Vec<f64> = mask.data().iter().map(|v| v.to_f64_lossy()).collect();
        let index = split.indices[pos];
        let path = out_dir.join(format!("mask_{index:06}.ppm"));
        write_gray_ppm(&path, w, h, &normalize_mask(&values))?;
        write_ppm(&out_dir.join(format!("input_{index:06}.ppm")), &split.images[pos])?;
        written.push(path);
    }
    Ok(written)
}

pub const TRAJECTORY_HEADER: [&str; 15] = [
    "index", "gt_tx", "gt_ty", "gt_tz", "gt_qw", "gt_qx", "gt_qy", "gt_qz", "pred_tx", "pred_ty", "pred_tz",
    "pred_qw", "pred_qx", "pred_qy", "pred_qz",
];

/// One row per sample with ground truth and prediction, both written with
/// the dataset's pose formatting.
pub fn write_trajectory(path: &Path, indices: &[usize], truth: &[Pose<f64>], predicted: &[Pose<f64>]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format("trajectory", format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(TRAJECTORY_HEADER).map_err(csv_err)?;
    for ((i, t), p) in indices.iter().zip(truth).zip(predicted) {
        let mut row = vec![i.to_string()];
        row.extend(pose_fields(t));
        row.extend(pose_fields(p));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_trajectory<T: Scalar>(model: &Model<T>, split: &PreparedSplit<T>, path: &Path) -> Result<()> {
    let all: Vec<usize> = (0..split.len()).collect();
    let predicted = predict_poses(model, split, &all, EVAL_BATCH)?;
    write_trajectory(path, &split.indices, &split.poses, &predicted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub median_t_err: f64,
    pub median_r_err_deg: f64,
    pub per_sample_t_err: Vec<f64>,
    pub per_sample_r_err_deg: Vec<f64>,
    /// `(threshold, fraction)` pairs; empty without a colorization branch.
    pub colorization_acc: Vec<(f64, f64)>,
    pub epochs_to_threshold: Option<usize>,
}

impl MetricsReport {
    pub fn from_pose(eval: &PoseEvaluation) -> Self {
        Self {
            median_t_err: eval.median_t_err,
            median_r_err_deg: eval.median_r_err_deg,
            per_sample_t_err: eval.translation_errors.clone(),
            per_sample_r_err_deg: eval.rotation_errors_deg.clone(),
            colorization_acc: Vec::new(),
            epochs_to_threshold: None,
        }
    }

    /// `key=value` lines; arrays are comma separated, accuracy entries are
    /// `threshold:fraction`, a missing epoch count is `none`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let acc = self
            .colorization_acc
            .iter()
            .map(|(t, f)| format!("{t:?}:{f:?}"))
            .collect::<Vec<_>>()
            .join(",");
        let epochs = self
            .epochs_to_threshold
            .map_or_else(|| "none".to_owned(), |e| e.to_string());
        format!(
            "median_t_err={:?}\nmedian_r_err_deg={:?}\nper_sample_t_err={}\nper_sample_r_err_deg={}\ncolorization_acc={acc}\nepochs_to_threshold={epochs}\n",
            self.median_t_err,
            self.median_r_err_deg,
            list(&self.per_sample_t_err),
            list(&self.per_sample_r_err_deg),
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("metrics report", m);
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let list = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(num).collect()
        };
        let acc = get("colorization_acc")?;
        let colorization_acc = if acc.is_empty() {
            Vec::new()
        } else {
            acc.split(',')
                .map(|p| {
                    let (t, f) = p.split_once(':').ok_or_else(|| bad(format!("bad accuracy entry {p:?}")))?;
                    Ok((num(t)?, num(f)?))
                })
                .collect::<Result<_>>()?
        };
        let epochs = get("epochs_to_threshold")?;
        Ok(Self {
            median_t_err: num(get("median_t_err")?)?,
            median_r_err_deg: num(get("median_r_err_deg")?)?,
            per_sample_t_err: list(get("per_sample_t_err")?)?,
            per_sample_r_err_deg: list(get("per_sample_r_err_deg")?)?,
            colorization_acc,
            epochs_to_threshold: match epochs {
                "none" => None,
                e => Some(e.parse().map_err(|_| bad(format!("bad epoch count {e:?}")))?),
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn accuracy(&self, threshold: f64) -> Option<f64> {
        self.colorization_acc
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|&(_, f)| f)
    }
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationLevel {
    pub name: &'static str,
    pub use_auxiliary: bool,
    pub use_attention: bool,
}

pub const ABLATION_LEVELS: [AblationLevel; 3] = [
    AblationLevel {
        name: "baseline",
        use_auxiliary: false,
        use_attention: false,
    },
    AblationLevel {
        name: "auxiliary",
        use_auxiliary: true,
        use_attention: false,
    },
    AblationLevel {
        name: "auxiliary+attention",
        use_auxiliary: true,
        use_attention: true,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationMetrics {
    pub median_t: f64,
    pub median_r_deg: f64,
    pub acc_at_5: Option<f64>,
    pub acc_at_10: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    /// `Err` holds the failure message of a run that did not finish.
    pub result: std::result::Result<AblationMetrics, String>,
}

pub const ABLATION_HEADER: [&str; 7] = [
    "config",
    "seed",
    "median_t",
    "median_r_deg",
    "acc_at_5",
    "acc_at_10",
    "epochs_to_threshold",
];

impl AblationRow {
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut f = vec![self.config.clone(), self.seed.to_string()];
        match &self.result {
            Ok(m) => f.extend([
                format!("{:?}", m.median_t),
                format!("{:?}", m.median_r_deg),
                opt(m.acc_at_5),
                opt(m.acc_at_10),
                m.epochs_to_threshold.map(|e| e.to_string()).unwrap_or_default(),
            ]),
            Err(_) => f.extend(["failed", "failed", "", "", ""].map(String::from)),
        }
        f
    }
}

/// Appends one row, writing the header first when the file is new or empty.
pub fn append_ablation_row(path: &Path, row: &AblationRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let csv_err = |e: csv::Error| Error::format("ablation table", format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(ABLATION_HEADER).map_err(csv_err)?;
    }
    w.write_record(row.fields()).map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let bad = |m: String| Error::format("ablation table", format!("{}: {m}", path.display()));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    if r.headers().map_err(|e| bad(e.to_string()))?.iter().ne(ABLATION_HEADER) {
        return Err(bad(format!("expected header {}", ABLATION_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let col = |k: usize| rec.get(k).unwrap_or_default();
        let opt = |k: usize| -> Result<Option<f64>> {
            match col(k) {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(format!("bad {} {s:?}", ABLATION_HEADER[k]))),
            }
        };
        let seed = col(1).parse().map_err(|_| bad(format!("bad seed {:?}", col(1))))?;
        let result = if col(2) == "failed" {
            Err("failed".to_owned())
        } else {
            Ok(AblationMetrics {
                median_t: opt(2)?.ok_or_else(|| bad("missing median_t".into()))?,
                median_r_deg: opt(3)?.ok_or_else(|| bad("missing median_r_deg".into()))?,
                acc_at_5: opt(4)?,
                acc_at_10: opt(5)?,
                epochs_to_threshold: match col(6) {
                    "" => None,
                    s => Some(s.parse().map_err(|_| bad(format!("bad epochs_to_threshold {s:?}")))?),
                },
            })
        };
        rows.push(AblationRow {
            config: col(0).to_owned(),
            seed,
            result,
        });
    }
    Ok(rows)
}

/// Per-level aggregate: medians over seeds of each run's medians.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub config: String,
    pub runs: usize,
    pub failed: usize,
    pub median_t: Option<f64>,
    pub median_r_deg: Option<f64>,
}

pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    ABLATION_LEVELS
        .iter()
        .map(|level| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.config == level.name).collect();
            let ok: Vec<&AblationMetrics> = mine.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            AblationSummary {
                config: level.name.to_owned(),
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                median_t: median(&ok.iter().map(|m| m.median_t).collect::<Vec<_>>()),
                median_r_deg: median(&ok.iter().map(|m| m.median_r_deg).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Seed used to initialize every ablation level of one run, so shared
/// parameters start identical.
pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, "model")
}

/// Trains one level and measures it on `test`. `threshold` is the median
/// test translation error defining convergence for `epochs_to_threshold`,
/// reported as the number of completed epochs.
pub fn run_level<T: Scalar>(
    level: AblationLevel,
    train_split: &PreparedSplit<T>,
    test: &PreparedSplit<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    threshold: f64,
) -> Result<AblationMetrics> {
    let cfg = ModelConfig {
        use_auxiliary: level.use_auxiliary,
        use_attention: level.use_attention,
        ..model_cfg.clone()
    };
    let mut model = Model::new(cfg, model_seed(train_cfg.seed))?;
    let mut reached: Option<usize> = None;
    let all: Vec<usize> = (0..test.len()).collect();
    let mut hook = |epoch: usize, m: &Model<T>| -> Result<()> {
        if reached.is_none() && evaluate_pose_at(m, test, &all, EVAL_BATCH)?.median_t_err < threshold {
            reached = Some(epoch + 1);
        }
        Ok(())
    };
    train(
        &mut model,
        train_split,
        train_cfg,
        TrainOptions {
            on_epoch: Some(&mut hook),
            ..TrainOptions::default()
        },
    )?;
    let pose = evaluate_pose(&model, test)?;
    let acc = if level.use_auxiliary {
        evaluate_colorization(&model, test, &DEFAULT_THRESHOLDS)?
    } else {
        Vec::new()
    };
    let pick = |t: f64| acc.iter().find(|a| a.0 == t).map(|a| a.1);
    Ok(AblationMetrics {
        median_t: pose.median_t_err,
        median_r_deg: pose.median_r_err_deg,
        acc_at_5: pick(5.0),
        acc_at_10: pick(10.0),
        epochs_to_threshold: reached,
    })
}

/// Runs every level for every seed. Rows are appended to `csv_path` as each
/// run finishes; a failing run is recorded and the rest continue.
pub fn ablate<T: Scalar>(
    train_split: &PreparedSplit<T>,
    test: &PreparedSplit<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    threshold: f64,
    csv_path: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(seeds.len() * ABLATION_LEVELS.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        for level in ABLATION_LEVELS {
            let result = run_level(level, train_split, test, model_cfg, &cfg, threshold).map_err(|e| e.to_string());
            let row = AblationRow {
                config: level.name.to_owned(),
                seed,
                result,
            };
            if let Some(path) = csv_path {
                append_ablation_row(path, &row)?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
