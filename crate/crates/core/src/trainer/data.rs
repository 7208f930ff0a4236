use std::path::Path;

use crate::colorspace::{normalize_lab_for_net, rgb_to_lab};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::Batch;
use crate::posemath::Pose;
use crate::scalar::Scalar;
use crate::synthscene::Sample;
use crate::tensor::Tensor;

/// Per-channel statistics of the training images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const STD_FLOOR: f64 = 1e-6;

impl Normalization {
    /// Mean and (population) standard deviation over every pixel of every
    /// image, per channel. The deviation is floored at [`STD_FLOOR`].
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a RgbImage<f64>>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        let images: Vec<&RgbImage<f64>> = images.into_iter().collect();
        for img in &images {
            for p in img.pixels() {
                for c in 0..3 {
                    sum[c] += p[c];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidArgument("normalization needs at least one pixel".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut sq = [0.0f64; 3];
        for img in &images {
            for p in img.pixels() {
                for c in 0..3 {
                    sq[c] += (p[c] - mean[c]).powi(2);
                }
            }
        }
        let std = sq.map(|s| (s / n as f64).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    /// `[3,H,W]` network input.
    pub fn apply<T: Scalar>(&self, image: &RgbImage<f64>) -> Tensor<T> {
        let plane = image.width() * image.height();
        let t = image.to_tensor();
        Tensor::from_fn(&[3, image.height(), image.width()], |i| {
            let c = i / plane;
            T::lit((t.data()[i] - self.mean[c]) / self.std[c])
        })
    }

    pub fn to_text(&self) -> String {
        let f = |v: [f64; 3]| format!("{:?},{:?},{:?}", v[0], v[1], v[2]);
        format!("mean={}\nstd={}\n", f(self.mean), f(self.std))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("normalization", format!("expected key=value, got {line:?}")))?;
            let vals: Vec<f64> = v
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("normalization", format!("bad numbers in {line:?}")))?;
            let arr: [f64; 3] = vals
                .try_into()
                .map_err(|_| Error::format("normalization", format!("expected 3 values in {line:?}")))?;
            match k.trim() {
                "mean" => mean = Some(arr),
                "std" => std = Some(arr),
                other => return Err(Error::format("normalization", format!("unknown key {other:?}"))),
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) => Ok(Self { mean, std }),
            _ => Err(Error::format("normalization", "need both mean and std")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// A split converted once into network tensors.
#[derive(Clone, Debug)]
pub struct PreparedSplit<T> {
    pub indices: Vec<usize>,
    pub rgb: Vec<Tensor<T>>,
    pub lightness: Vec<Tensor<T>>,
    pub ab: Vec<Tensor<T>>,
    pub poses: Vec<Pose<f64>>,
    pub images: Vec<RgbImage<f64>>,
}

impl<T: Scalar> PreparedSplit<T> {
    pub fn new(samples: &[Sample], norm: &Normalization) -> Result<Self> {
        let mut out = Self {
            indices: Vec::with_capacity(samples.len()),
            rgb: Vec::with_capacity(samples.len()),
            lightness: Vec::with_capacity(samples.len()),
            ab: Vec::with_capacity(samples.len()),
            poses: Vec::with_capacity(samples.len()),
            images: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            let lab = rgb_to_lab(&s.image)?;
            let (l, ab) = normalize_lab_for_net(&lab);
            out.indices.push(s.index);
            out.rgb.push(norm.apply(&s.image));
            out.lightness.push(l.cast());
            out.ab.push(ab.cast());
            out.poses.push(s.pose);
            out.images.push(s.image.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    /// Stacks the listed positions (not sample indices) into one batch.
    pub fn batch(&self, positions: &[usize]) -> Result<Batch<T>> {
        let stack = |v: &[Tensor<T>]| Tensor::stack(&positions.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        let pose_rows = |f: &dyn Fn(&Pose<f64>) -> [f64; 3]| {
            Tensor::from_fn(&[positions.len(), 3], |k| T::lit(f(&self.poses[positions[k / 3]])[k % 3]))
        };
        Ok(Batch {
            rgb: stack(&self.rgb)?,
            lightness: stack(&self.lightness)?,
            ab: stack(&self.ab)?,
            translation: pose_rows(&|p| p.translation()),
            log_rotation: pose_rows(&|p| p.log_rotation().0),
        })
    }
}
