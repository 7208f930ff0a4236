//! Joint training: seeded shuffling, grouped Adam, stepped learning-rate
//! decay, per-epoch CSV log and periodic checkpoints.

mod adam;
mod data;

pub use adam::{adam_step, AdamHyper, AdamState, LearningRates};
pub use data::{Normalization, PreparedSplit, STD_FLOOR};

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::evaluate_pose_at;
use crate::model::{load_params, save_params, Model};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Base rate of the backbone and colorizer parameters.
    pub lr_backbone: f64,
    /// Base rate of everything else.
    pub lr_other: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub adam: AdamHyper,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Number of training samples used for the per-epoch median errors.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            lr_backbone: 3e-4,
            lr_other: 1e-3,
            decay_factor: 0.9,
            decay_every: 10,
            adam: AdamHyper::default(),
            epochs: 300,
            seed: 0,
            checkpoint_every: 10,
            probe_size: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_other > 0.0) {
            return bad(format!(
                "learning rates must be positive, got {} and {}",
                self.lr_backbone, self.lr_other
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return bad(format!(
                "decay factor must lie in (0,1] with a positive period, got {} every {}",
                self.decay_factor, self.decay_every
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint period must be positive".into());
        }
        Ok(())
    }
}

/// `base · decay^floor(epoch / period)` for each group.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> LearningRates {
    let k = (epoch / cfg.decay_every) as i32;
    let f = cfg.decay_factor.powi(k);
    LearningRates {
        backbone: cfg.lr_backbone * f,
        other: cfg.lr_other * f,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub loss_joint: f64,
    pub loss_pose: f64,
    /// Absent when the model has no colorization branch.
    pub loss_color: Option<f64>,
    pub lr_backbone: f64,
    pub lr_other: f64,
    /// Medians over the fixed probe subset of the training split, measured
    /// after the epoch's updates.
    pub median_t_err: f64,
    pub median_r_err_deg: f64,
}

pub const LOG_HEADER: [&str; 8] = [
    "epoch",
    "loss_joint",
    "loss_pose",
    "loss_color",
    "lr_backbone",
    "lr_other",
    "median_t_err",
    "median_r_err_deg",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LOG_HEADER).expect("in-memory write");
        for r in &self.records {
            let color = r.loss_color.map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.loss_joint),
                format!("{:?}", r.loss_pose),
                color,
                format!("{:?}", r.lr_backbone),
                format!("{:?}", r.lr_other),
                format!("{:?}", r.median_t_err),
                format!("{:?}", r.median_r_err_deg),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("training log", m);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().ne(LOG_HEADER) {
            return Err(bad(format!("expected header {}", LOG_HEADER.join(","))));
        }
        let mut records = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .unwrap_or_default()
                    .parse()
                    .map_err(|_| bad(format!("row {}: bad {}", i + 1, LOG_HEADER[k])))
            };
            records.push(EpochRecord {
                epoch: rec
                    .get(0)
                    .unwrap_or_default()
                    .parse()
                    .map_err(|_| bad(format!("row {}: bad epoch", i + 1)))?,
                loss_joint: num(1)?,
                loss_pose: num(2)?,
                loss_color: match rec.get(3).unwrap_or_default() {
                    "" => None,
                    _ => Some(num(3)?),
                },
                lr_backbone: num(4)?,
                lr_other: num(5)?,
                median_t_err: num(6)?,
                median_r_err_deg: num(7)?,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

pub const LOG_FILE: &str = "train_log.csv";

pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("ckpt_{epochs_done:04}.axps"))
}

pub fn optimizer_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("ckpt_{epochs_done:04}.adam"))
}

/// Highest-numbered `ckpt_NNNN.axps` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let epoch = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".axps"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().map_or(true, |(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best)
}

/// Optional side effects of [`train`].
pub struct TrainOptions<'a, T> {
    /// Directory for the log and checkpoints; nothing is written when absent.
    pub out_dir: Option<&'a Path>,
    /// Continue from the latest checkpoint in `out_dir` if there is one.
    pub resume: bool,
    /// Called after every epoch with the zero-based epoch index.
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &Model<T>) -> Result<()>>,
}

impl<T> Default for TrainOptions<'_, T> {
    fn default() -> Self {
        Self {
            out_dir: None,
            resume: false,
            on_epoch: None,
        }
    }
}

/// Evenly spaced positions used for the per-epoch training medians.
pub fn probe_positions(n: usize, size: usize) -> Vec<usize> {
    let k = size.min(n);
    (0..k).map(|i| i * n / k).collect()
}

/// Trains `model` in place. Each epoch visits the split in a permutation
/// seeded by `(cfg.seed, epoch)`, so a resumed run replays the same order
/// without any stored generator state.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &PreparedSplit<T>,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_, T>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut state = AdamState::new(model.params());
    let mut log = TrainLog::default();
    let mut start = 0;
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if opts.resume {
            if let Some((done, path)) = latest_checkpoint(dir)? {
                model.load_params(load_params(&path)?)?;
                state = AdamState::load(&optimizer_path(dir, done))?;
                state.check_matches(model.params())?;
                let previous = TrainLog::read(&dir.join(LOG_FILE))?;
                if previous.records.len() < done {
                    return Err(Error::format(
                        "training log",
                        format!("{} rows but checkpoint is at epoch {done}", previous.records.len()),
                    ));
                }
                log.records = previous.records[..done].to_vec();
                start = done;
            }
        }
    }
    let probe = probe_positions(data.len(), cfg.probe_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in start..cfg.epochs {
        let rates = lr_at_epoch(cfg, epoch);
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);
        let (mut joint, mut pose, mut color) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.batch(chunk)?;
            let mut tape = Tape::new();
            let p = model.bind(&mut tape);
            let (_, losses) = model.losses(&mut tape, &p, &batch)?;
            let value = |v| tape.value(v).item().map_or(f64::NAN, |x: T| x.to_f64_lossy());
            let lj = value(losses.joint);
            if !lj.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            let w = chunk.len() as f64;
            joint += w * lj;
            pose += w * value(losses.pose);
            color += w * losses.color.map_or(0.0, value);
            let mut g = tape.backward(losses.joint)?;
            let grads: IndexMap<String, _> = p
                .iter()
                .map(|(k, v)| (k.to_owned(), g.take(v).expect("parameter gradient")))
                .collect();
            adam_step(model.params_mut(), &grads, &mut state, rates, cfg.adam)?;
        }
        let n = data.len() as f64;
        let probe_eval = evaluate_pose_at(model, data, &probe, cfg.batch_size)?;
        log.records.push(EpochRecord {
            epoch,
            loss_joint: joint / n,
            loss_pose: pose / n,
            loss_color: model.config().use_auxiliary.then_some(color / n),
            lr_backbone: rates.backbone,
            lr_other: rates.other,
            median_t_err: probe_eval.median_t_err,
            median_r_err_deg: probe_eval.median_r_err_deg,
        });
        if let Some(dir) = opts.out_dir {
            log.write(&dir.join(LOG_FILE))?;
            let done = epoch + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
                save_params(checkpoint_path(dir, done), model.params())?;
                state.save(&optimizer_path(dir, done))?;
            }
        }
        if let Some(hook) = opts.on_epoch.as_mut() {
            hook(epoch, model)?;
        }
    }
    Ok(log)
}
