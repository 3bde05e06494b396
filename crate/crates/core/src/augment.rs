//! Occlusion augmentation and the two view pipelines.
//!
//! The random rectangle mask grows a union of random rectangles until it
//! covers a target fraction `r` of the image. A candidate rectangle that
//! would push the union past the target is shrunk by
//! `sqrt(remaining / rect_area)` and placed anyway, so the masked area never
//! exceeds `⌈r·h·w⌉`. The loop is bounded by `max_attempts` placements and
//! accepts once it is within `tolerance` of the target.
//!
//! Masks occlude: masked pixels are set to 0, everything else is untouched.

use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub max_height: usize,
    pub max_width: usize,
    pub max_attempts: usize,
    pub tolerance: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            max_height: 128,
            max_width: 128,
            max_attempts: 100,
            tolerance: 0.02,
        }
    }
}

impl MaskSpec {
    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.ratio)));
        }
        if self.max_height == 0 || self.max_width == 0 {
            return Err(Error::Config("maximum mask size must be at least 1x1".into()));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(Error::Config(format!(
                "mask tolerance {} outside [0, 1)",
                self.tolerance
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if self.max_height > h || self.max_width > w {
            return Err(Error::Config(format!(
                "maximum mask size {}x{} exceeds image {h}x{w}",
                self.max_height, self.max_width
            )));
        }
        Ok(())
    }

    /// Copy with the maximum rectangle size limited to the image bounds.
    pub fn clamped_to(&self, h: usize, w: usize) -> MaskSpec {
        MaskSpec {
            max_height: self.max_height.min(h).max(1),
            max_width: self.max_width.min(w).max(1),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
    pub rects: Vec<Rect>,
    /// Set when the placement budget ran out before reaching the target.
    pub shortfall: bool,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
            count: 0,
            rects: Vec::new(),
            shortfall: false,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        m.fill(Rect {
            top: 0,
            left: 0,
            height,
            width,
        });
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn popcount(&self) -> usize {
        self.count
    }

    pub fn masked_fraction(&self) -> f64 {
        self.count as f64 / (self.height * self.width).max(1) as f64
    }

    fn unset_in(&self, r: Rect) -> usize {
        let mut n = 0;
        for y in r.top..r.top + r.height {
            let row = &self.bits[y * self.width + r.left..y * self.width + r.left + r.width];
            n += row.iter().filter(|b| !**b).count();
        }
        n
    }

    /// Unions `r` into the mask and records it.
    pub fn fill(&mut self, r: Rect) {
        assert!(
            r.top + r.height <= self.height && r.left + r.width <= self.width,
            "rectangle out of bounds"
        );
        for y in r.top..r.top + r.height {
            for b in &mut self.bits[y * self.width + r.left..y * self.width + r.left + r.width] {
                if !*b {
                    *b = true;
                    self.count += 1;
                }
            }
        }
        self.rects.push(r);
    }
}

/// Grows a union-of-rectangles mask covering a fraction `spec.ratio` of an
/// `h × w` image.
pub fn random_rectangle_mask(h: usize, w: usize, spec: &MaskSpec, rng: &mut impl Rng) -> Result<BinaryMask> {
    spec.validate_for(h, w)?;
    let mut mask = BinaryMask::empty(h, w);
    let target = spec.ratio * (h * w) as f64;
    let accept = target * (1.0 - spec.tolerance);
    let mut attempts = 0;
    while (mask.count as f64) < accept {
        if attempts == spec.max_attempts {
            mask.shortfall = true;
            break;
        }
        attempts += 1;
        let rh = rng.random_range(1..=spec.max_height);
        let rw = rng.random_range(1..=spec.max_width);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let rect = Rect {
            top,
            left,
            height: rh,
            width: rw,
        };
        let new_area = mask.count + mask.unset_in(rect);
        if new_area as f64 <= target {
            mask.fill(rect);
            continue;
        }
        let remain = target - mask.count as f64;
        let factor = (remain / (rh * rw) as f64).sqrt();
        let mut ah = ((rh as f64 * factor).floor() as usize).max(1);
        let mut aw = ((rw as f64 * factor).floor() as usize).max(1);
        // The 1-pixel floor on one side can leave the rectangle larger than
        // the remaining budget; trim the other side.
        if (ah * aw) as f64 > remain {
            if ah == 1 {
                aw = ((remain / ah as f64).floor() as usize).max(1);
            } else {
                ah = ((remain / aw as f64).floor() as usize).max(1);
            }
        }
        mask.fill(Rect {
            top,
            left,
            height: ah,
            width: aw,
        });
    }
    Ok(mask)
}

/// Zeroes masked pixels in all channels.
pub fn apply_mask(img: &ImageBuffer, mask: &BinaryMask) -> Result<ImageBuffer> {
    if img.height() != mask.height || img.width() != mask.width {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height,
            mask.width,
            img.height(),
            img.width()
        )));
    }
    let mut out = img.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(3).zip(&mask.bits) {
        if m {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel with radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur per channel with clamp-to-edge borders.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (h, w) = (img.height(), img.width());
    let src = img.data();
    let mut tmp = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y * w + xx) * 3 + c] as f64;
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = img.clone();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                dst[(y * w + x) * 3 + c] = acc as f32;
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Jitter strengths: factors are drawn from `[1−s, 1+s]`, hue shifts from
/// `[−hue, hue]` (in turns).
#[derive(Clone, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

impl ColorJitter {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v, hi) in [
            ("brightness", self.brightness, 1.0),
            ("contrast", self.contrast, 1.0),
            ("saturation", self.saturation, 1.0),
            ("hue", self.hue, 0.5),
        ] {
            if !(0.0..=hi).contains(&v) {
                return Err(Error::Config(format!("jitter {name} strength {v} outside [0, {hi}]")));
            }
        }
        Ok(())
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn adjust_brightness(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= factor);
    out.clamp_unit();
    out
}

/// Blends towards the mean luma of the whole image.
pub fn adjust_contrast(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let n = (img.height() * img.width()).max(1) as f32;
    let mean = img.data().chunks_exact(3).map(luma).sum::<f32>() / n;
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = mean + (*v - mean) * factor);
    out.clamp_unit();
    out
}

/// Blends each pixel towards its own luma.
pub fn adjust_saturation(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let g = luma(px);
        px.iter_mut().for_each(|v| *v = g + (*v - g) * factor);
    }
    out.clamp_unit();
    out
}

fn rgb_to_hsv(px: &[f32]) -> (f32, f32, f32) {
    let (r, g, b) = (px[0], px[1], px[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &ImageBuffer, shift: f32) -> ImageBuffer {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px);
        px.copy_from_slice(&hsv_to_rgb(h + shift, s, v));
    }
    out.clamp_unit();
    out
}

/// Brightness, contrast, saturation, then hue, each with a random factor.
/// Zero-strength components are skipped entirely.
pub fn color_jitter(img: &ImageBuffer, s: &ColorJitter, rng: &mut impl Rng) -> ImageBuffer {
    let mut out = img.clone();
    if s.brightness > 0.0 {
        let f = rng.random_range(1.0 - s.brightness..=1.0 + s.brightness);
        out = adjust_brightness(&out, f as f32);
    }
    if s.contrast > 0.0 {
        let f = rng.random_range(1.0 - s.contrast..=1.0 + s.contrast);
        out = adjust_contrast(&out, f as f32);
    }
    if s.saturation > 0.0 {
        let f = rng.random_range(1.0 - s.saturation..=1.0 + s.saturation);
        out = adjust_saturation(&out, f as f32);
    }
    if s.hue > 0.0 {
        let f = rng.random_range(-s.hue..=s.hue);
        out = adjust_hue(&out, f as f32);
    }
    out
}

/// Values `≥ threshold` become `1 − value`, channel-wise.
pub fn solarize(img: &ImageBuffer, threshold: f32) -> ImageBuffer {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    });
    out
}

pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, img.pixel(y, w - 1 - x));
        }
    }
    out
}

/// Zero-pads by `pad` on every side, then crops an `h × w` window with its
/// top-left corner at `(dy, dx)` in padded coordinates.
pub fn pad_crop(img: &ImageBuffer, pad: usize, dy: usize, dx: usize) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    assert!(dy <= 2 * pad && dx <= 2 * pad, "crop offset outside padded image");
    let mut out = ImageBuffer::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 + dy as i64 - pad as i64;
            let sx = x as i64 + dx as i64 - pad as i64;
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                out.set_pixel(y, x, img.pixel(sy as usize, sx as usize));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomErasing {
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub max_tries: usize,
}

impl Default for RandomErasing {
    fn default() -> Self {
        Self {
            area: (0.02, 0.4),
            aspect: (0.3, 3.3),
            max_tries: 10,
        }
    }
}

/// One erased rectangle with area fraction uniform in `cfg.area` and
/// log-uniform aspect ratio; empty if nothing fits within `max_tries`.
pub fn random_erasing_mask(h: usize, w: usize, cfg: &RandomErasing, rng: &mut impl Rng) -> BinaryMask {
    let mut mask = BinaryMask::empty(h, w);
    let area = (h * w) as f64;
    for _ in 0..cfg.max_tries {
        let target = rng.random_range(cfg.area.0..=cfg.area.1) * area;
        let log_ar = rng.random_range(cfg.aspect.0.ln()..=cfg.aspect.1.ln());
        let ar = log_ar.exp();
        let eh = (target * ar).sqrt().round() as usize;
        let ew = (target / ar).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            mask.fill(Rect {
                top,
                left,
                height: eh,
                width: ew,
            });
            break;
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalAugConfig {
    pub flip_prob: f64,
    pub pad: usize,
    pub crop_prob: f64,
    pub erase_prob: f64,
    pub erasing: RandomErasing,
}

impl Default for NormalAugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 10,
            crop_prob: 1.0,
            erase_prob: 0.5,
            erasing: RandomErasing::default(),
        }
    }
}

impl NormalAugConfig {
    /// No-op configuration: every stage disabled.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip", self.flip_prob),
            ("crop", self.crop_prob),
            ("erase", self.erase_prob),
        ] {
            check_prob(name, p)?;
        }
        let e = &self.erasing;
        if !(0.0 < e.area.0 && e.area.0 <= e.area.1 && e.area.1 < 1.0) {
            return Err(Error::Config(format!("erasing area range {:?} invalid", e.area)));
        }
        if !(0.0 < e.aspect.0 && e.aspect.0 <= e.aspect.1) {
            return Err(Error::Config(format!("erasing aspect range {:?} invalid", e.aspect)));
        }
        Ok(())
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} probability {p} outside [0, 1]")))
    }
}

/// Horizontal flip, pad-and-random-crop, random erasing.
pub fn normal_pipeline(img: &ImageBuffer, cfg: &NormalAugConfig, rng: &mut impl Rng) -> ImageBuffer {
    let mut out = img.clone();
    if rng.random_bool(cfg.flip_prob) {
        out = hflip(&out);
    }
    if cfg.pad > 0 && rng.random_bool(cfg.crop_prob) {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, cfg.pad, dy, dx);
    }
    if rng.random_bool(cfg.erase_prob) {
        let mask = random_erasing_mask(out.height(), out.width(), &cfg.erasing, rng);
        out = apply_mask(&out, &mask).expect("mask built for this image");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongAugConfig {
    pub mask: MaskSpec,
    pub jitter: ColorJitter,
    pub jitter_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob: f64,
    pub solarize_threshold: f32,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            mask: MaskSpec::default(),
            jitter: ColorJitter::default(),
            jitter_prob: 0.8,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
        }
    }
}

impl StrongAugConfig {
    /// Every photometric stage disabled and a zero mask ratio.
    pub fn identity() -> Self {
        Self {
            mask: MaskSpec::default().with_ratio(0.0),
            jitter_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.jitter.validate()?;
        check_prob("jitter", self.jitter_prob)?;
        check_prob("blur", self.blur_prob)?;
        check_prob("solarize", self.solarize_prob)?;
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("blur sigma range ({lo}, {hi}) invalid")));
        }
        Ok(())
    }
}

/// Colour jitter → blur → solarize → random rectangle mask. Returns the
/// view and the mask that was applied.
pub fn strong_pipeline(
    img: &ImageBuffer,
    cfg: &StrongAugConfig,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer, BinaryMask)> {
    let mut out = img.clone();
    if rng.random_bool(cfg.jitter_prob) {
        out = color_jitter(&out, &cfg.jitter, rng);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, sigma)?;
    }
    if rng.random_bool(cfg.solarize_prob) {
        out = solarize(&out, cfg.solarize_threshold);
    }
    let spec = cfg.mask.clamped_to(out.height(), out.width());
    let mask = random_rectangle_mask(out.height(), out.width(), &spec, rng)?;
    let out = apply_mask(&out, &mask)?;
    Ok((out, mask))
}

/// Reference occluders for comparing against the rectangle mask.
#[derive(Clone, Debug, PartialEq)]
pub enum Occluder {
    RandomErasing(RandomErasing),
    /// One `size × size` square, fully inside the image.
    Cutout {
        size: usize,
    },
    /// `grid × grid` cells, each hidden independently with `p_hide`.
    HideAndSeek {
        grid: usize,
        p_hide: f64,
    },
    RectangleMask(MaskSpec),
}

impl FromStr for Occluder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_erasing" => Ok(Occluder::RandomErasing(RandomErasing::default())),
            "cutout" => Ok(Occluder::Cutout { size: 64 }),
            "hide_and_seek" => Ok(Occluder::HideAndSeek { grid: 4, p_hide: 0.5 }),
            "random_mask" => Ok(Occluder::RectangleMask(MaskSpec::default())),
            other => Err(Error::InvalidArgument(format!("unknown occluder kind '{other}'"))),
        }
    }
}

pub fn occluder_mask(h: usize, w: usize, kind: &Occluder, rng: &mut impl Rng) -> Result<BinaryMask> {
    match kind {
        Occluder::RandomErasing(cfg) => Ok(random_erasing_mask(h, w, cfg, rng)),
        Occluder::Cutout { size } => {
            let mut mask = BinaryMask::empty(h, w);
            let s = (*size).min(h).min(w);
            if s > 0 {
                let top = rng.random_range(0..=h - s);
                let left = rng.random_range(0..=w - s);
                mask.fill(Rect {
                    top,
                    left,
                    height: s,
                    width: s,
                });
            }
            Ok(mask)
        }
        Occluder::HideAndSeek { grid, p_hide } => {
            if *grid == 0 || *grid > h.min(w) {
                return Err(Error::InvalidArgument(format!(
                    "hide-and-seek grid {grid} invalid for {h}x{w}"
                )));
            }
            check_prob("hide", *p_hide)?;
            let mut mask = BinaryMask::empty(h, w);
            for gy in 0..*grid {
                for gx in 0..*grid {
                    let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
                    let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                    if rng.random_bool(*p_hide) {
                        mask.fill(Rect {
                            top: y0,
                            left: x0,
                            height: y1 - y0,
                            width: x1 - x0,
                        });
                    }
                }
            }
            Ok(mask)
        }
        Occluder::RectangleMask(spec) => random_rectangle_mask(h, w, &spec.clamped_to(h, w), rng),
    }
}

pub fn baseline_occluders(img: &ImageBuffer, kind: &Occluder, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let mask = occluder_mask(img.height(), img.width(), kind, rng)?;
    apply_mask(img, &mask)
}
