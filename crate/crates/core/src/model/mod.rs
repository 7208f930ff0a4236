//! Localization network, colorization U-Net, fusion, attention and regressor.
//!
//! Parameters live in a flat, ordered, name-keyed [`ParamStore`]. A forward
//! pass first [binds](Model::bind) every parameter onto a [`Tape`] and then
//! threads [`Var`] handles through the sub-networks:
//!
//! ```text
//! rgb ──► backbone ──► M_l ─┐
//!                           ├─► fuse (1x1 conv + ReLU) ──► M_fuse ──► attention ──► regressor ──► (x, log q)
//! L ───► colorizer ──► M_c ─┘                                        (optional)
//!            └──► predicted (a, b)
//! ```
//!
//! Both feature taps sit at 1/16 of the input resolution. With the auxiliary
//! branch disabled the colorizer does not exist and `fuse` projects `M_l`
//! alone.

mod checkpoint;
mod loss;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{loss_colorization, loss_joint, loss_pose};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::{Tape, Tensor, Var};

/// Number of stride-2 stages in both the backbone and the colorizer encoder.
pub const DOWNSAMPLING_STAGES: usize = 4;
/// Spatial reduction of both feature taps relative to the input.
pub const FEATURE_STRIDE: usize = 1 << DOWNSAMPLING_STAGES;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output width of each backbone stage; the first four stages halve the
    /// resolution, any further stages keep it.
    pub backbone_widths: Vec<usize>,
    /// Number of downsampling steps in the colorizer encoder.
    pub colorizer_depth: usize,
    /// Width of each colorizer encoder level above the bottleneck, one per
    /// downsampling step. The bottleneck width equals the backbone output width.
    pub colorizer_widths: Vec<usize>,
    /// Output channels of both fusion layers.
    pub fuse_width: usize,
    /// Hidden width of the pose regressor.
    pub embed_width: usize,
    pub use_auxiliary: bool,
    pub use_attention: bool,
    /// Rotation weight in the pose loss.
    pub beta_intra: f64,
    /// Colorization weight in the joint loss.
    pub beta_inter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            backbone_widths: vec![8, 16, 32, 32, 32],
            colorizer_depth: 4,
            colorizer_widths: vec![4, 8, 16, 16],
            fuse_width: 32,
            embed_width: 64,
            use_auxiliary: true,
            use_attention: true,
            beta_intra: 3.0,
            beta_inter: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_height < FEATURE_STRIDE || self.input_width < FEATURE_STRIDE {
            return bad(format!(
                "input {}x{} is smaller than {FEATURE_STRIDE}x{FEATURE_STRIDE}",
                self.input_height, self.input_width
            ));
        }
        if self.input_height % FEATURE_STRIDE != 0 || self.input_width % FEATURE_STRIDE != 0 {
            return bad(format!(
                "input {}x{} must be a multiple of {FEATURE_STRIDE} in both extents",
                self.input_height, self.input_width
            ));
        }
        if self.backbone_widths.len() < DOWNSAMPLING_STAGES || self.backbone_widths.contains(&0) {
            return bad(format!(
                "backbone needs at least {DOWNSAMPLING_STAGES} non-zero stage widths, got {:?}",
                self.backbone_widths
            ));
        }
        if self.colorizer_depth != DOWNSAMPLING_STAGES {
            return bad(format!(
                "colorizer depth must be {DOWNSAMPLING_STAGES} so its bottleneck matches the backbone, got {}",
                self.colorizer_depth
            ));
        }
        if self.colorizer_widths.len() != self.colorizer_depth || self.colorizer_widths.contains(&0) {
            return bad(format!(
                "colorizer needs {} non-zero level widths, got {:?}",
                self.colorizer_depth, self.colorizer_widths
            ));
        }
        if self.fuse_width == 0 || self.embed_width == 0 {
            return bad("fuse and embed widths must be positive".into());
        }
        if !(self.beta_intra > 0.0) || !(self.beta_inter >= 0.0) {
            return bad(format!(
                "need beta_intra > 0 and beta_inter >= 0, got {} and {}",
                self.beta_intra, self.beta_inter
            ));
        }
        Ok(())
    }

    pub fn backbone_width(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        (self.input_height / FEATURE_STRIDE, self.input_width / FEATURE_STRIDE)
    }

    fn stage_stride(stage: usize) -> usize {
        if stage < DOWNSAMPLING_STAGES {
            2
        } else {
            1
        }
    }

    /// Name and shape of every parameter, in a stable order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = 3;
        for (i, &w) in self.backbone_widths.iter().enumerate() {
            conv(format!("backbone.{i}.conv_a"), w, cin, 3);
            conv(format!("backbone.{i}.conv_b"), w, w, 3);
            cin = w;
        }
        let cb = self.backbone_width();
        if self.use_auxiliary {
            let cw = &self.colorizer_widths;
            let mut cin = 1;
            for (i, &w) in cw.iter().enumerate() {
                conv(format!("colorizer.enc.{i}"), w, cin, 3);
                cin = w;
            }
            conv("colorizer.bottleneck".into(), cb, cin, 3);
            for i in (0..cw.len()).rev() {
                let below = cw.get(i + 1).copied().unwrap_or(cb);
                conv(format!("colorizer.dec.{i}"), cw[i], below + cw[i], 3);
            }
            conv("colorizer.head".into(), 2, cw[0], 1);
            conv("fuse".into(), self.fuse_width, cb + cb, 1);
        } else {
            conv("fuse".into(), self.fuse_width, cb, 1);
        }
        if self.use_attention {
            conv("attn_fuse".into(), self.fuse_width, 2 * self.fuse_width, 1);
        }
        let (fh, fw) = self.feature_extent();
        let flat = self.fuse_width * fh * fw;
        out.push(("regressor.hidden.weight".into(), vec![self.embed_width, flat]));
        out.push(("regressor.hidden.bias".into(), vec![self.embed_width]));
        for head in ["translation", "rotation"] {
            out.push((format!("regressor.{head}.weight"), vec![3, self.embed_width]));
            out.push((format!("regressor.{head}.bias"), vec![3]));
        }
        out
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Localization backbone and the whole colorizer.
    BackboneAndColorizer,
    /// Fusion, attention fusion and regressor.
    Other,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("backbone.") || name.starts_with("colorizer.") {
            ParamGroup::BackboneAndColorizer
        } else {
            ParamGroup::Other
        }
    }
}

pub type ParamStore<T> = IndexMap<String, Tensor<T>>;

/// Parameters bound to a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Plain outputs of [`Model::infer`].
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub translation: Tensor<T>,
    pub log_rotation: Tensor<T>,
    pub pred_ab: Option<Tensor<T>>,
    pub attention_mask: Option<Tensor<T>>,
}

/// Loss handles produced by [`Model::losses`].
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub joint: Var,
    pub pose: Var,
    pub color: Option<Var>,
}

/// One training or evaluation batch, already normalized.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B,3,H,W]` network input.
    pub rgb: Tensor<T>,
    /// `[B,1,H,W]` lightness input, scaled to `[0,1]`.
    pub lightness: Tensor<T>,
    /// `[B,2,H,W]` chroma target, scaled by the chroma range.
    pub ab: Tensor<T>,
    /// `[B,3]` translation target.
    pub translation: Tensor<T>,
    /// `[B,3]` log-rotation target.
    pub log_rotation: Tensor<T>,
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub translation: Var,
    pub log_rotation: Var,
    pub pred_ab: Option<Var>,
    pub attention_mask: Option<Var>,
    pub backbone: Var,
    pub colorizer_features: Option<Var>,
    pub fused: Var,
    pub attended: Option<Var>,
}

/// Intermediate maps of the attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    /// Channel-excited map, `M_fuse ⊗ GMP(M_fuse)`.
    pub excited: Var,
    /// Single-channel spatial mask, channel mean of `excited`.
    pub mask: Var,
    /// Region-weighted map, `M_fuse ⊗ mask`.
    pub attended: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded Gaussian initialization. Each tensor draws from its own stream
    /// derived from `(seed, name)`, so shared parameters start identical across
    /// ablation variants.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.ends_with("conv_b.weight") {
                    std *= 0.5;
                }
                if name.starts_with("regressor.translation") || name.starts_with("regressor.rotation") {
                    std = (1.0 / fan_in as f64).sqrt();
                }
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
            };
            params.insert(name, tensor);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config,
            params: ParamStore::new(),
        };
        model.load_params(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Replaces all parameters; fails with a per-field report when names or
    /// shapes differ from what the configuration requires.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        let expected = self.config.parameter_shapes();
        let mut diffs = Vec::new();
        for (name, shape) in &expected {
            match params.get(name) {
                None => diffs.push(format!("  missing {name} {shape:?}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    diffs.push(format!("  {name}: expected {shape:?}, found {:?}", t.shape()))
                }
                Some(_) => {}
            }
        }
        for (name, t) in &params {
            if !expected.iter().any(|(n, _)| n == name) {
                diffs.push(format!("  unexpected {name} {:?}", t.shape()));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Incompatible(diffs.join("\n")));
        }
        self.params = expected
            .into_iter()
            .map(|(name, _)| {
                let t = params.get(&name).expect("checked").clone();
                (name, t)
            })
            .collect();
        Ok(())
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Pairs already-recorded handles with parameter names, in store order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Forward pass without losses, returning plain tensors.
    pub fn infer(&self, batch: &Batch<T>) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let rgb = tape.constant(batch.rgb.clone());
        let x_l = self
            .config
            .use_auxiliary
            .then(|| tape.constant(batch.lightness.clone()));
        let out = self.forward(&mut tape, &p, rgb, x_l)?;
        Ok(Inference {
            translation: tape.value(out.translation).clone(),
            log_rotation: tape.value(out.log_rotation).clone(),
            pred_ab: out.pred_ab.map(|v| tape.value(v).clone()),
            attention_mask: out.attention_mask.map(|v| tape.value(v).clone()),
        })
    }

    /// Forward pass plus all loss terms for `batch`.
    pub fn losses(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<(ForwardOutput, LossTerms)> {
        let rgb = tape.constant(batch.rgb.clone());
        let x_l = self
            .config
            .use_auxiliary
            .then(|| tape.constant(batch.lightness.clone()));
        let out = self.forward(tape, p, rgb, x_l)?;
        let x_gt = tape.constant(batch.translation.clone());
        let w_gt = tape.constant(batch.log_rotation.clone());
        let pose = loss_pose(
            tape,
            out.translation,
            out.log_rotation,
            x_gt,
            w_gt,
            T::lit(self.config.beta_intra),
        )?;
        let color = match out.pred_ab {
            Some(pred) => {
                let gt = tape.constant(batch.ab.clone());
                Some(loss_colorization(tape, pred, gt)?)
            }
            None => None,
        };
        let joint = loss_joint(tape, color, pose, T::lit(self.config.beta_inter))?;
        Ok((out, LossTerms { joint, pose, color }))
    }

    fn conv(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv2d(
            x,
            p.get(&format!("{name}.weight")),
            p.get(&format!("{name}.bias")),
            stride,
            pad,
        )
    }

    fn check_image(&self, tape: &Tape<T>, x: Var, channels: usize, what: &str) -> Result<()> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        let cfg = &self.config;
        if c != channels || h != cfg.input_height || w != cfg.input_width {
            return Err(Error::shape(
                "model",
                format!(
                    "{what} must be [B,{channels},{},{}], got {:?}",
                    cfg.input_height,
                    cfg.input_width,
                    tape.shape(x)
                ),
            ));
        }
        Ok(())
    }

    /// Residual backbone: `[B,3,H,W] -> M_l [B,C,H/16,W/16]`.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        self.check_image(tape, image, 3, "image")?;
        let mut x = image;
        for i in 0..self.config.backbone_widths.len() {
            let stride = ModelConfig::stage_stride(i);
            let a = self.conv(tape, p, &format!("backbone.{i}.conv_a"), x, stride, 1)?;
            let h = tape.relu(a);
            let r = self.conv(tape, p, &format!("backbone.{i}.conv_b"), h, 1, 1)?;
            let s = tape.add(h, r)?;
            x = tape.relu(s);
        }
        Ok(x)
    }

    /// U-Net colorizer: `X_L [B,1,H,W] -> (pred_ab [B,2,H,W], M_c [B,C,H/16,W/16])`.
    pub fn colorizer_forward(&self, tape: &mut Tape<T>, p: &Bound, x_l: Var) -> Result<(Var, Var)> {
        self.colorizer_impl(tape, p, x_l, None)
    }

    /// Colorizer forward with the skip connection at encoder level `level`
    /// replaced by zeros. Diagnostic only.
    pub fn colorizer_forward_without_skip(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x_l: Var,
        level: usize,
    ) -> Result<(Var, Var)> {
        self.colorizer_impl(tape, p, x_l, Some(level))
    }

    fn colorizer_impl(&self, tape: &mut Tape<T>, p: &Bound, x_l: Var, drop_skip: Option<usize>) -> Result<(Var, Var)> {
        if !self.config.use_auxiliary {
            return Err(Error::InvalidArgument(
                "colorizer called on a model without the auxiliary branch".into(),
            ));
        }
        self.check_image(tape, x_l, 1, "lightness input")?;
        let depth = self.config.colorizer_widths.len();
        let mut skips = Vec::with_capacity(depth);
        let mut x = x_l;
        for i in 0..depth {
            let stride = if i == 0 { 1 } else { 2 };
            let c = self.conv(tape, p, &format!("colorizer.enc.{i}"), x, stride, 1)?;
            x = tape.relu(c);
            skips.push(x);
        }
        let c = self.conv(tape, p, "colorizer.bottleneck", x, 2, 1)?;
        let bottleneck = tape.relu(c);
        let mut y = bottleneck;
        for i in (0..depth).rev() {
            let up = tape.upsample_nearest(y, 2)?;
            let skip = if drop_skip == Some(i) {
                let zeros = Tensor::zeros(tape.shape(skips[i]));
                tape.constant(zeros)
            } else {
                skips[i]
            };
            let cat = tape.concat_channels(up, skip)?;
            let c = self.conv(tape, p, &format!("colorizer.dec.{i}"), cat, 1, 1)?;
            y = tape.relu(c);
        }
        let pred_ab = self.conv(tape, p, "colorizer.head", y, 1, 0)?;
        Ok((pred_ab, bottleneck))
    }

    /// Learned fusion `relu(W * (a ⊕ b) + bias)` with the named 1x1 layer.
    pub fn fuse(&self, tape: &mut Tape<T>, p: &Bound, layer: &str, a: Var, b: Option<Var>) -> Result<Var> {
        fuse_maps(
            tape,
            p.get(&format!("{layer}.weight")),
            p.get(&format!("{layer}.bias")),
            a,
            b,
        )
    }

    /// Attention module followed by the second fusion. Returns the fused
    /// output and the intermediate maps.
    pub fn attention(&self, tape: &mut Tape<T>, p: &Bound, m_fuse: Var) -> Result<(Var, AttentionMaps)> {
        if !self.config.use_attention {
            return Err(Error::InvalidArgument("model has no attention module".into()));
        }
        let maps = attention_maps(tape, m_fuse)?;
        let out = self.fuse(tape, p, "attn_fuse", m_fuse, Some(maps.attended))?;
        Ok((out, maps))
    }

    /// Flatten, shared hidden layer, then translation and log-rotation heads.
    pub fn regressor_forward(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(features).to_vec();
        let batch = shape[0];
        let flat: usize = shape[1..].iter().product();
        let x = tape.reshape(features, &[batch, flat])?;
        let h = tape.linear(x, p.get("regressor.hidden.weight"), p.get("regressor.hidden.bias"))?;
        let h = tape.relu(h);
        let t = tape.linear(h, p.get("regressor.translation.weight"), p.get("regressor.translation.bias"))?;
        let r = tape.linear(h, p.get("regressor.rotation.weight"), p.get("regressor.rotation.bias"))?;
        Ok((t, r))
    }

    /// Full forward pass. `x_l` is required exactly when the auxiliary branch
    /// is enabled and ignored otherwise.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, rgb: Var, x_l: Option<Var>) -> Result<ForwardOutput> {
        let m_l = self.backbone_forward(tape, p, rgb)?;
        let (pred_ab, m_c) = if self.config.use_auxiliary {
            let x_l = x_l.ok_or_else(|| {
                Error::InvalidArgument("auxiliary branch enabled but no lightness input given".into())
            })?;
            let [b_rgb, ..] = tape.value(rgb).dims4()?;
            let [b_l, ..] = tape.value(x_l).dims4()?;
            if b_rgb != b_l {
                return Err(Error::shape("model", format!("batch {b_rgb} (rgb) vs {b_l} (lightness)")));
            }
            let (ab, m_c) = self.colorizer_forward(tape, p, x_l)?;
            (Some(ab), Some(m_c))
        } else {
            (None, None)
        };
        let fused = self.fuse(tape, p, "fuse", m_l, m_c)?;
        let (features, maps) = if self.config.use_attention {
            let (out, maps) = self.attention(tape, p, fused)?;
            (out, Some(maps))
        } else {
            (fused, None)
        };
        let (translation, log_rotation) = self.regressor_forward(tape, p, features)?;
        Ok(ForwardOutput {
            translation,
            log_rotation,
            pred_ab,
            attention_mask: maps.map(|m| m.mask),
            backbone: m_l,
            colorizer_features: m_c,
            fused,
            attended: maps.map(|m| m.attended),
        })
    }
}

/// `relu(weight * (a ⊕ b) + bias)` with a 1x1 kernel; `b` may be absent.
pub fn fuse_maps<T: Scalar>(tape: &mut Tape<T>, weight: Var, bias: Var, a: Var, b: Option<Var>) -> Result<Var> {
    let input = match b {
        Some(b) => tape.concat_channels(a, b)?,
        None => a,
    };
    let y = tape.conv2d(input, weight, bias, 1, 0)?;
    Ok(tape.relu(y))
}

/// Parameter-free part of the attention module:
/// `M_SaE = M ⊗ GMP(M)`, `mask = GAP_c(M_SaE)`, `M_atten = M ⊗ mask`.
pub fn attention_maps<T: Scalar>(tape: &mut Tape<T>, m_fuse: Var) -> Result<AttentionMaps> {
    let v = tape.global_max_pool_spatial(m_fuse)?;
    let excited = tape.broadcast_mul(m_fuse, v)?;
    let mask = tape.global_avg_pool_channels(excited)?;
    let attended = tape.broadcast_mul(m_fuse, mask)?;
    Ok(AttentionMaps {
        excited,
        mask,
        attended,
    })
}

#[cfg(test)]
mod tests;
