//! Training configuration and its flat `key=value` text form.
//!
//! A file may start from a preset (`preset=toy` or `preset=vit_base`);
//! every other line overrides one field. Blank lines and `#` comments are
//! ignored, unknown keys are rejected. `num_classes=0` and `n_cameras=0`
//! mean "infer from the training split".

use std::fmt::Write as _;
use std::str::FromStr;

use crate::augment::{NormalAugConfig, StrongAugConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::losses::validate_lambda;
use crate::model::ModelConfig;
use crate::retrieval::FeatureMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    VitBase,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::VitBase => "vit_base",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "vit_base" => Ok(Preset::VitBase),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected toy or vit_base)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub base_lr: f64,
    /// Defaults to `0.002 × base_lr` when unset.
    pub min_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub warmup_epochs: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub normal: NormalAugConfig,
    pub strong: StrongAugConfig,
    pub eval_feature: FeatureMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::VitBase)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::VitBase => Self {
                preset: p,
                model: ModelConfig {
                    encoder: EncoderConfig {
                        n_cameras: 0,
                        ..EncoderConfig::vit_base()
                    },
                    heads: HeadConfig::full(0),
                },
                epochs: 120,
                batch_p: 25,
                batch_k: 4,
                base_lr: 0.0125,
                min_lr: None,
                momentum: 0.9,
                weight_decay: 1e-4,
                lambda: 0.95,
                seed: 0,
                warmup_epochs: 0,
                grad_clip: 0.0,
                checkpoint_interval: 0,
                normal: NormalAugConfig::default(),
                strong: StrongAugConfig::default(),
                eval_feature: FeatureMode::Concat,
            },
            Preset::Toy => Self {
                preset: p,
                model: ModelConfig {
                    encoder: EncoderConfig {
                        n_cameras: 0,
                        sie_coefficient: 0.5,
                        ..EncoderConfig::toy()
                    },
                    heads: HeadConfig::toy(0),
                },
                epochs: 200,
                batch_p: 5,
                batch_k: 4,
                base_lr: 0.05,
                grad_clip: 5.0,
                normal: NormalAugConfig {
                    pad: 2,
                    crop_prob: 0.0,
                    erase_prob: 0.0,
                    ..NormalAugConfig::default()
                },
                ..Self::preset(Preset::VitBase)
            },
        }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy)
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(0.002 * self.base_lr)
    }

    /// Checks every field that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!(
                "batch needs at least 2 identities with 2 images each, got {}x{}",
                self.batch_p, self.batch_k
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        let min_lr = self.min_lr();
        if !(0.0..=self.base_lr).contains(&min_lr) {
            return bad(format!("min_lr {min_lr} outside [0, base_lr]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup must be shorter than training".into());
        }
        validate_lambda(self.lambda)?;
        self.normal.validate()?;
        self.strong.validate()?;
        let mut m = self.model.clone();
        m.encoder.n_cameras = m.encoder.n_cameras.max(1);
        m.heads.num_classes = m.heads.num_classes.max(2);
        m.validate()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let h = &self.model.heads;
        let n = &self.normal;
        let s = &self.strong;
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_p", self.batch_p.to_string()),
            ("batch_k", self.batch_k.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("min_lr", self.min_lr().to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda", self.lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("image_height", e.height.to_string()),
            ("image_width", e.width.to_string()),
            ("patch_size", e.patch.to_string()),
            ("patch_stride", e.stride.to_string()),
            ("embed_dim", e.dim.to_string()),
            ("layers", e.layers.to_string()),
            ("heads", e.heads.to_string()),
            ("mlp_ratio", e.mlp_ratio.to_string()),
            ("jigsaw_groups", e.jigsaw_groups.to_string()),
            ("jigsaw_shift", e.jigsaw_shift.to_string()),
            ("sie_coefficient", e.sie_coefficient.to_string()),
            ("n_cameras", e.n_cameras.to_string()),
            ("learn_patch_proj", e.learn_patch_proj.to_string()),
            ("num_classes", h.num_classes.to_string()),
            ("proj_hidden", h.proj_hidden.to_string()),
            ("proj_out", h.proj_out.to_string()),
            ("pred_hidden", h.pred_hidden.to_string()),
            ("bnneck_momentum", h.bnneck_momentum.to_string()),
            ("flip_prob", n.flip_prob.to_string()),
            ("pad", n.pad.to_string()),
            ("crop_prob", n.crop_prob.to_string()),
            ("erase_prob", n.erase_prob.to_string()),
            ("erase_area_min", n.erasing.area.0.to_string()),
            ("erase_area_max", n.erasing.area.1.to_string()),
            ("mask_ratio", s.mask.ratio.to_string()),
            ("mask_max_height", s.mask.max_height.to_string()),
            ("mask_max_width", s.mask.max_width.to_string()),
            ("mask_max_attempts", s.mask.max_attempts.to_string()),
            ("mask_tolerance", s.mask.tolerance.to_string()),
            ("jitter_prob", s.jitter_prob.to_string()),
            ("jitter_brightness", s.jitter.brightness.to_string()),
            ("jitter_contrast", s.jitter.contrast.to_string()),
            ("jitter_saturation", s.jitter.saturation.to_string()),
            ("jitter_hue", s.jitter.hue.to_string()),
            ("blur_prob", s.blur_prob.to_string()),
            ("blur_sigma_min", s.blur_sigma.0.to_string()),
            ("blur_sigma_max", s.blur_sigma.1.to_string()),
            ("solarize_prob", s.solarize_prob.to_string()),
            ("solarize_threshold", s.solarize_threshold.to_string()),
            ("eval_feature", self.eval_feature.name().to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        let mut k = vec!["preset"];
        k.extend(Self::default().entries().into_iter().map(|(k, _)| k));
        k
    }

    /// Sets one field from its text form. `preset` is not accepted here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let h = &mut self.model.heads;
        let n = &mut self.normal;
        let s = &mut self.strong;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_p" => self.batch_p = parse(key, value)?,
            "batch_k" => self.batch_k = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "min_lr" => self.min_lr = Some(parse(key, value)?),
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "image_height" => e.height = parse(key, value)?,
            "image_width" => e.width = parse(key, value)?,
            "patch_size" => e.patch = parse(key, value)?,
            "patch_stride" => e.stride = parse(key, value)?,
            "embed_dim" => e.dim = parse(key, value)?,
            "layers" => e.layers = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "jigsaw_groups" => e.jigsaw_groups = parse(key, value)?,
            "jigsaw_shift" => e.jigsaw_shift = parse(key, value)?,
            "sie_coefficient" => e.sie_coefficient = parse(key, value)?,
            "n_cameras" => e.n_cameras = parse(key, value)?,
            "learn_patch_proj" => e.learn_patch_proj = parse(key, value)?,
            "num_classes" => h.num_classes = parse(key, value)?,
            "proj_hidden" => h.proj_hidden = parse(key, value)?,
            "proj_out" => h.proj_out = parse(key, value)?,
            "pred_hidden" => h.pred_hidden = parse(key, value)?,
            "bnneck_momentum" => h.bnneck_momentum = parse(key, value)?,
            "flip_prob" => n.flip_prob = parse(key, value)?,
            "pad" => n.pad = parse(key, value)?,
            "crop_prob" => n.crop_prob = parse(key, value)?,
            "erase_prob" => n.erase_prob = parse(key, value)?,
            "erase_area_min" => n.erasing.area.0 = parse(key, value)?,
            "erase_area_max" => n.erasing.area.1 = parse(key, value)?,
            "mask_ratio" => s.mask.ratio = parse(key, value)?,
            "mask_max_height" => s.mask.max_height = parse(key, value)?,
            "mask_max_width" => s.mask.max_width = parse(key, value)?,
            "mask_max_attempts" => s.mask.max_attempts = parse(key, value)?,
            "mask_tolerance" => s.mask.tolerance = parse(key, value)?,
            "jitter_prob" => s.jitter_prob = parse(key, value)?,
            "jitter_brightness" => s.jitter.brightness = parse(key, value)?,
            "jitter_contrast" => s.jitter.contrast = parse(key, value)?,
            "jitter_saturation" => s.jitter.saturation = parse(key, value)?,
            "jitter_hue" => s.jitter.hue = parse(key, value)?,
            "blur_prob" => s.blur_prob = parse(key, value)?,
            "blur_sigma_min" => s.blur_sigma.0 = parse(key, value)?,
            "blur_sigma_max" => s.blur_sigma.1 = parse(key, value)?,
            "solarize_prob" => s.solarize_prob = parse(key, value)?,
            "solarize_threshold" => s.solarize_threshold = parse(key, value)?,
            "eval_feature" => self.eval_feature = value.parse()?,
            "preset" => return Err(Error::Config("preset must be chosen before other keys".into())),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. A `preset` line resets
    /// to that preset first, wherever it appears.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            self = Self::preset(p.parse()?);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("preset={}\n", self.preset.name());
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// The contrastive branch runs only when it contributes to the loss.
    pub fn uses_strong_view(&self) -> bool {
        self.lambda < 1.0
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
