//! Flat `key=value` run configuration with dotted keys.
//!
//! Layers, later wins: built-in defaults, `--config` file, `--set` pairs,
//! dedicated flags. Unknown keys are rejected everywhere.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use auxloc::model::ModelConfig;
use auxloc::synthscene::{DatasetSpec, TrajectorySpec};
use auxloc::trainer::{AdamHyper, TrainConfig};
use indexmap::IndexMap;

use crate::UsageError;

struct Key {
    name: &'static str,
    default: String,
    doc: &'static str,
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn keys() -> Vec<Key> {
    let d = DatasetSpec::default();
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let k = |name, default: String, doc| Key { name, default, doc };
    vec![
        k("seed", "0".into(), "master seed; every component seed is derived from it"),
        k("out", String::new(), "output directory (required by gen-data, train, ablate)"),
        k("threads", "1".into(), "worker cap; computation is currently single-threaded"),
        k("data.dir", "data".into(), "dataset directory read by train, eval, ablate"),
        k("data.extent", d.extent.to_string(), "side of the square scene area"),
        k("data.objects", d.num_objects.to_string(), "objects placed in the scene"),
        k("data.width", d.width.to_string(), "image width (multiple of 16)"),
        k("data.height", d.height.to_string(), "image height (multiple of 16)"),
        k("data.n_train", d.n_train.to_string(), "training views"),
        k("data.n_test", d.n_test.to_string(), "test views"),
        k("model.use_auxiliary", m.use_auxiliary.to_string(), "colorization branch and feature fusion"),
        k("model.use_attention", m.use_attention.to_string(), "attention re-weighting of fused features"),
        k("model.beta_intra", m.beta_intra.to_string(), "rotation weight inside the pose loss"),
        k("model.beta_inter", m.beta_inter.to_string(), "colorization weight in the joint loss"),
        k("model.backbone_widths", list(&m.backbone_widths), "channels of the five backbone stages"),
        k("model.colorizer_widths", list(&m.colorizer_widths), "channels of the colorizer encoder levels"),
        k("model.fuse_width", m.fuse_width.to_string(), "channels after fusion"),
        k("model.embed_width", m.embed_width.to_string(), "hidden width of the pose regressor"),
        k("train.epochs", t.epochs.to_string(), "training epochs"),
        k("train.batch_size", t.batch_size.to_string(), "mini-batch size"),
        k("train.lr_backbone", t.lr_backbone.to_string(), "base rate of backbone and colorizer"),
        k("train.lr_other", t.lr_other.to_string(), "base rate of all other layers"),
        k("train.decay_factor", t.decay_factor.to_string(), "rate multiplier per decay period"),
        k("train.decay_every", t.decay_every.to_string(), "decay period in epochs"),
        k("train.adam_beta1", t.adam.beta1.to_string(), "Adam first-moment decay"),
        k("train.adam_beta2", t.adam.beta2.to_string(), "Adam second-moment decay"),
        k("train.adam_eps", t.adam.eps.to_string(), "Adam denominator offset"),
        k("train.checkpoint_every", t.checkpoint_every.to_string(), "epochs between checkpoints"),
        k("train.probe_size", t.probe_size.to_string(), "training samples in the logged medians"),
        k("eval.split", "test".into(), "split evaluated by eval (train or test)"),
        k("eval.thresholds", "5,10".into(), "colorization thresholds in Lab units"),
        k("eval.mask_count", "8".into(), "samples exported by --export-masks"),
        k("ablate.seeds", "0,1,2,3,4".into(), "seeds of the ablation runs"),
        k("ablate.threshold_fraction", "0.05".into(), "epochs-to-threshold level, as a fraction of the extent"),
    ]
}

/// Key list with defaults, shown at the end of `--help`.
pub fn help_text() -> String {
    let mut s = String::from("Configuration keys (file lines or --set KEY=VALUE; default in brackets):\n");
    for k in keys() {
        let _ = writeln!(s, "  {:<28} {} [{}]", k.name, k.doc, k.default);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<&'static str, String>,
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: keys().into_iter().map(|k| (k.name, k.default)).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> anyhow::Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(usage(format!("unknown configuration key {key:?}"))),
        }
    }

    /// Applies `KEY=VALUE`.
    pub fn set_pair(&mut self, pair: &str) -> anyhow::Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("expected KEY=VALUE, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every line of a config file. `#` starts a comment; a key may
    /// appear once per file.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_owned()) {
                return Err(usage(format!("{origin}:{}: duplicate key {k:?}", n + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key, one per line, in documentation order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> anyhow::Result<V> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| usage(format!("{key}: cannot parse {raw:?}")))
    }

    fn parse_list<V: std::str::FromStr>(&self, key: &str) -> anyhow::Result<Vec<V>> {
        let raw = self.get(key);
        raw.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| usage(format!("{key}: cannot parse {s:?} in {raw:?}"))))
            .collect()
    }

    fn flag(&self, key: &str) -> anyhow::Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(usage(format!("{key}: expected true or false, got {other:?}"))),
        }
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.parse("seed")
    }

    pub fn out(&self) -> Option<PathBuf> {
        Some(self.get("out")).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn threads(&self) -> anyhow::Result<usize> {
        let n: usize = self.parse("threads")?;
        if n == 0 {
            return Err(usage("threads must be at least 1".into()));
        }
        Ok(n)
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data.dir"))
    }

    pub fn dataset_spec(&self) -> anyhow::Result<DatasetSpec> {
        let extent: f64 = self.parse("data.extent")?;
        let spec = DatasetSpec {
            seed: self.seed()?,
            extent,
            num_objects: self.parse("data.objects")?,
            width: self.parse("data.width")?,
            height: self.parse("data.height")?,
            n_train: self.parse("data.n_train")?,
            n_test: self.parse("data.n_test")?,
            train_path: TrajectorySpec::train_default(extent),
            test_path: TrajectorySpec::test_default(extent),
        };
        Ok(spec)
    }

    /// Model settings for `width x height` inputs.
    pub fn model(&self, width: usize, height: usize) -> anyhow::Result<ModelConfig> {
        let colorizer_widths: Vec<usize> = self.parse_list("model.colorizer_widths")?;
        let cfg = ModelConfig {
            input_width: width,
            input_height: height,
            backbone_widths: self.parse_list("model.backbone_widths")?,
            colorizer_depth: colorizer_widths.len(),
            colorizer_widths,
            fuse_width: self.parse("model.fuse_width")?,
            embed_width: self.parse("model.embed_width")?,
            use_auxiliary: self.flag("model.use_auxiliary")?,
            use_attention: self.flag("model.use_attention")?,
            beta_intra: self.parse("model.beta_intra")?,
            beta_inter: self.parse("model.beta_inter")?,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.parse("train.batch_size")?,
            lr_backbone: self.parse("train.lr_backbone")?,
            lr_other: self.parse("train.lr_other")?,
            decay_factor: self.parse("train.decay_factor")?,
            decay_every: self.parse("train.decay_every")?,
            adam: AdamHyper {
                beta1: self.parse("train.adam_beta1")?,
                beta2: self.parse("train.adam_beta2")?,
                eps: self.parse("train.adam_eps")?,
            },
            epochs: self.parse("train.epochs")?,
            seed: self.seed()?,
            checkpoint_every: self.parse("train.checkpoint_every")?,
            probe_size: self.parse("train.probe_size")?,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval_split(&self) -> anyhow::Result<auxloc::synthscene::Split> {
        match self.get("eval.split") {
            "train" => Ok(auxloc::synthscene::Split::Train),
            "test" => Ok(auxloc::synthscene::Split::Test),
            other => Err(usage(format!("eval.split: expected train or test, got {other:?}"))),
        }
    }

    pub fn thresholds(&self) -> anyhow::Result<Vec<f64>> {
        self.parse_list("eval.thresholds")
    }

    pub fn mask_count(&self) -> anyhow::Result<usize> {
        self.parse("eval.mask_count")
    }

    pub fn ablation_seeds(&self) -> anyhow::Result<Vec<u64>> {
        let seeds: Vec<u64> = self.parse_list("ablate.seeds")?;
        if seeds.is_empty() {
            return Err(usage("ablate.seeds: need at least one seed".into()));
        }
        Ok(seeds)
    }

    pub fn threshold_fraction(&self) -> anyhow::Result<f64> {
        let f: f64 = self.parse("ablate.threshold_fraction")?;
        if !(f > 0.0) {
            return Err(usage(format!("ablate.threshold_fraction must be positive, got {f}")));
        }
        Ok(f)
    }
}
