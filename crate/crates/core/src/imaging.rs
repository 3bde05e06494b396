//! Image buffers, Market-1501-style dataset directories, a procedural
//! synthetic person dataset, and identity-balanced (P×K) batch sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Identity label carried by junk/distractor samples. Never used as a class.
pub const JUNK_IDENTITY: usize = usize::MAX;

/// `height × width × 3` image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image data length {} != {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite pixel value {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Clamps every value into `[0, 1]`; non-finite values become 0.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
    }

    /// Bilinear resampling with half-pixel centres and clamp-to-edge.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageBuffer {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = vec![0.0f32; height * width * 3];
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let (a, b, c, d) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * wx;
                    let bot = c[ch] + (d[ch] - c[ch]) * wx;
                    out[(y * width + x) * 3 + ch] = (top + (bot - top) * wy).clamp(0.0, 1.0);
                }
            }
        }
        ImageBuffer {
            height,
            width,
            data: out,
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        ImageBuffer {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Decodes any supported file to RGB at its stored size.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonSample {
    pub image: ImageBuffer,
    /// Dense label within the split; [`JUNK_IDENTITY`] for junk samples.
    pub identity: usize,
    /// Identity as written in the file name (−1 for junk).
    pub raw_id: i64,
    pub camera: usize,
    pub is_junk: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Result of reading one split directory.
#[derive(Debug)]
pub struct LoadedSplit {
    pub samples: Vec<PersonSample>,
    /// Files that matched the naming convention but could not be decoded,
    /// plus files whose names did not parse.
    pub skipped: usize,
}

/// Parses `<id>_c<cam>...` into `(raw_id, camera)`.
pub fn parse_market_name(file_name: &str) -> Option<(i64, usize)> {
    let stem = file_name.split('.').next()?;
    let mut parts = stem.split('_');
    let id: i64 = parts.next()?.parse().ok()?;
    let cam_tok = parts.next()?.strip_prefix('c')?;
    let digits: String = cam_tok.chars().take_while(|c| c.is_ascii_digit()).collect();
    let cam: usize = digits.parse().ok()?;
    Some((id, cam))
}

pub fn market_name(raw_id: i64, camera: usize, index: usize) -> String {
    if raw_id < 0 {
        format!("{raw_id}_c{camera}s1_{index:06}.png")
    } else {
        format!("{raw_id:04}_c{camera}s1_{index:06}.png")
    }
}

/// Loads `root/<split>/` resized to `size = (height, width)`.
pub fn load_dataset(root: &Path, split: Split, size: (usize, usize)) -> Result<LoadedSplit> {
    let dir = root.join(split.dir_name());
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut raw = Vec::new();
    let mut skipped = 0usize;
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some((raw_id, camera)) = parse_market_name(name) else {
            log::warn!(
                "skipping {}: name does not follow <id>_c<cam> convention",
                path.display()
            );
            skipped += 1;
            continue;
        };
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let image = ImageBuffer::from_rgb8(&img).resize_bilinear(size.0, size.1);
        raw.push((image, raw_id, camera));
    }
    if raw.is_empty() {
        return Err(Error::Dataset(format!("no usable samples in {}", dir.display())));
    }
    let samples = relabel(raw);
    Ok(LoadedSplit { samples, skipped })
}

fn relabel(raw: Vec<(ImageBuffer, i64, usize)>) -> Vec<PersonSample> {
    let ids: BTreeMap<i64, usize> = {
        let mut uniq: Vec<i64> = raw.iter().map(|r| r.1).filter(|&id| id >= 0).collect();
        uniq.sort_unstable();
        uniq.dedup();
        uniq.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    };
    raw.into_iter()
        .map(|(image, raw_id, camera)| {
            let is_junk = raw_id < 0;
            PersonSample {
                image,
                identity: if is_junk { JUNK_IDENTITY } else { ids[&raw_id] },
                raw_id,
                camera,
                is_junk,
            }
        })
        .collect()
}

/// Writes samples as `<dir>/<market name>.png`; returns the written paths.
pub fn save_samples(dir: &Path, samples: &[PersonSample]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let path = dir.join(market_name(s.raw_id, s.camera, i));
        s.image.save_png(&path)?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub n_cams: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub occluder_prob: f64,
}

impl SynthConfig {
    pub fn new(n_ids: usize, imgs_per_id: usize, n_cams: usize, seed: u64) -> Self {
        Self {
            n_ids,
            imgs_per_id,
            n_cams,
            seed,
            height: 256,
            width: 128,
            occluder_prob: 0.3,
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct IdentityLook {
    upper: [f32; 3],
    lower: [f32; 3],
    stripe: [f32; 3],
    stripes: usize,
    glyph_row: f32,
    glyph_col: f32,
    skin: [f32; 3],
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
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

fn identity_look(id: usize, seed: u64) -> IdentityLook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    // Golden-ratio hue spacing keeps upper-body colours of different
    // identities apart.
    let hue = (id as f32 * 0.618_034 + rng.random::<f32>() * 0.05).rem_euclid(1.0);
    let upper = hsv_to_rgb(hue, 0.75, 0.85);
    let lower = hsv_to_rgb(
        hue + 0.37 + rng.random::<f32>() * 0.2,
        0.6,
        0.35 + 0.4 * rng.random::<f32>(),
    );
    let stripe = hsv_to_rgb(hue + 0.5, 0.3, 0.95);
    IdentityLook {
        upper,
        lower,
        stripe,
        stripes: 1 + id % 4,
        glyph_row: 0.2 + 0.6 * ((id * 7 % 5) as f32 / 4.0),
        glyph_col: 0.15 + 0.7 * ((id * 3 % 4) as f32 / 3.0),
        skin: hsv_to_rgb(0.07, 0.35 + 0.2 * rng.random::<f32>(), 0.85),
    }
}

fn background(y: usize, h: usize) -> [f32; 3] {
    let t = y as f32 / h.max(1) as f32;
    [0.55 + 0.1 * t, 0.57 + 0.08 * t, 0.6]
}

/// Colour of canonical (untransformed) identity rendering at `(y, x)`,
/// `None` where the body silhouette does not cover the pixel.
fn silhouette_color(look: &IdentityLook, y: f32, x: f32, h: f32, w: f32) -> Option<[f32; 3]> {
    let (u, v) = (y / h, x / w);
    // head
    let (hu, hv) = (0.11, 0.5);
    let dy = (u - hu) / 0.07;
    let dx = (v - hv) / 0.14;
    if dy * dy + dx * dx <= 1.0 {
        return Some(look.skin);
    }
    // torso
    if (0.18..0.55).contains(&u) && (0.22..0.78).contains(&v) {
        let tu = (u - 0.18) / 0.37;
        let tv = (v - 0.22) / 0.56;
        let gr = look.glyph_row;
        let gc = look.glyph_col;
        if (tu - gr).abs() < 0.12 && (tv - gc).abs() < 0.15 {
            return Some([1.0 - look.upper[0], 1.0 - look.upper[1], 1.0 - look.upper[2]]);
        }
        let band = (tu * (2 * look.stripes + 1) as f32).floor() as usize;
        if band % 2 == 1 {
            return Some(look.stripe);
        }
        return Some(look.upper);
    }
    // legs
    if (0.55..0.95).contains(&u) && ((0.27..0.47).contains(&v) || (0.53..0.73).contains(&v)) {
        return Some(look.lower);
    }
    None
}

fn render(look: &IdentityLook, h: usize, w: usize, dy: i64, dx: i64) -> ImageBuffer {
    let mut img = ImageBuffer::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            let color = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                silhouette_color(look, sy as f32 + 0.5, sx as f32 + 0.5, h as f32, w as f32)
            } else {
                None
            };
            img.set_pixel(y, x, color.unwrap_or_else(|| background(y, h)));
        }
    }
    img
}

/// Canonical rendering of identity `id` without camera or placement effects.
pub fn render_identity(id: usize, cfg: &SynthConfig) -> ImageBuffer {
    render(&identity_look(id, cfg.seed), cfg.height, cfg.width, 0, 0)
}

/// Per-camera fixed linear colour transform `gain ⊙ rgb + offset`.
fn camera_transform(camera: usize) -> ([f32; 3], [f32; 3]) {
    let a = camera as f32 * 1.7;
    (
        [
            1.0 + 0.12 * a.cos(),
            1.0 + 0.1 * (a + 2.0).cos(),
            1.0 + 0.12 * (a + 4.0).cos(),
        ],
        [0.03 * a.sin(), 0.02 * (a + 1.0).sin(), 0.03 * (a + 3.0).sin()],
    )
}

/// Deterministic procedural dataset: `n_ids × imgs_per_id` samples; image
/// `j` of each identity is seen by camera `j mod n_cams`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<PersonSample>> {
    if cfg.n_ids < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 identities for retrieval, got {}",
            cfg.n_ids
        )));
    }
    if cfg.imgs_per_id < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 images per identity, got {}",
            cfg.imgs_per_id
        )));
    }
    if cfg.n_cams == 0 || cfg.height < 8 || cfg.width < 8 {
        return Err(Error::InvalidArgument(
            "n_cams must be positive and images at least 8x8".into(),
        ));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_dy = (h as f64 * 0.1).floor() as i64;
    let max_dx = (w as f64 * 0.1).floor() as i64;
    let mut out = Vec::with_capacity(cfg.n_ids * cfg.imgs_per_id);
    for id in 0..cfg.n_ids {
        let look = identity_look(id, cfg.seed);
        for j in 0..cfg.imgs_per_id {
            let camera = j % cfg.n_cams;
            let dy = rng.random_range(-max_dy..=max_dy);
            let dx = rng.random_range(-max_dx..=max_dx);
            let mut img = render(&look, h, w, dy, dx);
            let (gain, offset) = camera_transform(camera);
            for px in img.data_mut().chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = px[c] * gain[c] + offset[c];
                }
            }
            if rng.random_bool(cfg.occluder_prob) {
                let oh = rng.random_range(h / 5..=(2 * h / 5).max(h / 5));
                let ow = rng.random_range(w / 3..=(2 * w / 3).max(w / 3));
                let oy = rng.random_range(0..=h - oh);
                let ox = rng.random_range(0..=w - ow);
                let gray: f32 = rng.random_range(0.3..0.7);
                for y in oy..oy + oh {
                    for x in ox..ox + ow {
                        img.set_pixel(y, x, [gray; 3]);
                    }
                }
            }
            img.clamp_unit();
            out.push(PersonSample {
                image: img,
                identity: id,
                raw_id: id as i64,
                camera,
                is_junk: false,
            });
        }
    }
    Ok(out)
}

/// Train, query and gallery sets of one dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: Vec<PersonSample>,
    pub query: Vec<PersonSample>,
    pub gallery: Vec<PersonSample>,
}

/// Splits samples by identity.
///
/// Held-out: the first `⌈n/2⌉` identities train, each remaining identity
/// contributes its first image to the query set and the rest to the gallery.
/// Held-in: every sample trains; per identity the first two images are
/// queries and the rest gallery. Training identities are renumbered densely.
pub fn split_by_identity(samples: &[PersonSample], held_in: bool) -> Result<DatasetSplits> {
    let mut by_id: BTreeMap<i64, Vec<&PersonSample>> = BTreeMap::new();
    for s in samples.iter().filter(|s| !s.is_junk) {
        by_id.entry(s.raw_id).or_default().push(s);
    }
    let n = by_id.len();
    let n_query = if held_in { 2 } else { 1 };
    if n < 2 || by_id.values().any(|v| v.len() <= n_query) {
        return Err(Error::Dataset(format!(
            "need at least 2 identities with more than {n_query} images each"
        )));
    }
    let n_train = if held_in { n } else { n.div_ceil(2) };
    let mut out = DatasetSplits {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for (rank, imgs) in by_id.values().enumerate() {
        if rank < n_train {
            out.train.extend(imgs.iter().map(|&s| PersonSample {
                identity: rank,
                ..s.clone()
            }));
        }
        if held_in || rank >= n_train {
            out.query.extend(imgs[..n_query].iter().map(|&s| s.clone()));
            out.gallery.extend(imgs[n_query..].iter().map(|&s| s.clone()));
        }
    }
    Ok(out)
}

/// `P × K` batch, stored as indices into the dataset it was drawn from,
/// grouped by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityBatch {
    pub indices: Vec<usize>,
    pub p: usize,
    pub k_imgs: usize,
}

impl IdentityBatch {
    pub fn samples<'a>(&'a self, dataset: &'a [PersonSample]) -> impl Iterator<Item = &'a PersonSample> + 'a {
        self.indices.iter().map(move |&i| &dataset[i])
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Identity-balanced sampler with epoch semantics: identities are visited in
/// a shuffled order and every identity is used once before any repeats.
/// Junk samples are never drawn.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: Vec<Vec<usize>>,
    p: usize,
    k_imgs: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl PkSampler {
    pub fn new(dataset: &[PersonSample], p: usize, k_imgs: usize) -> Result<Self> {
        if p == 0 || k_imgs == 0 {
            return Err(Error::InvalidArgument("P and K must be positive".into()));
        }
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.iter().enumerate() {
            if !s.is_junk {
                map.entry(s.identity).or_default().push(i);
            }
        }
        if p > map.len() {
            return Err(Error::InvalidArgument(format!(
                "P={p} exceeds the {} identities available",
                map.len()
            )));
        }
        Ok(Self {
            by_identity: map.into_values().collect(),
            p,
            k_imgs,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_identity.len() / self.p
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> IdentityBatch {
        if self.order.is_empty() || self.cursor + self.p > self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = (0..self.by_identity.len()).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let ids = &self.order[self.cursor..self.cursor + self.p];
        self.cursor += self.p;
        let mut indices = Vec::with_capacity(self.p * self.k_imgs);
        for &id in ids {
            let pool = &self.by_identity[id];
            if pool.len() >= self.k_imgs {
                indices.extend(pool.choose_multiple(rng, self.k_imgs).copied());
            } else {
                for _ in 0..self.k_imgs {
                    indices.push(pool[rng.random_range(0..pool.len())]);
                }
            }
        }
        IdentityBatch {
            indices,
            p: self.p,
            k_imgs: self.k_imgs,
        }
    }
}

/// One-shot draw of a `P × K` batch.
pub fn sample_batch(dataset: &[PersonSample], p: usize, k_imgs: usize, rng: &mut impl Rng) -> Result<IdentityBatch> {
    Ok(PkSampler::new(dataset, p, k_imgs)?.next_batch(rng))
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn identity_splits() {
        let data = tiny_dataset(5, 4);
        let s = split_by_identity(&data, false).unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!((s.query.len(), s.gallery.len()), (2, 6));
        assert!(s.query.iter().all(|q| q.raw_id >= 3));
        let h = split_by_identity(&data, true).unwrap();
        assert_eq!((h.train.len(), h.query.len(), h.gallery.len()), (20, 10, 10));
        assert_eq!(h.train.iter().map(|s| s.identity).max(), Some(4));
        assert!(split_by_identity(&tiny_dataset(2, 2), true).is_err());
    }

    fn tiny_dataset(n_ids: usize, per: usize) -> Vec<PersonSample> {
        let cfg = SynthConfig::new(n_ids, per, 2, 1).with_size(16, 8);
        generate_synthetic_dataset(&cfg).unwrap()
    }

    #[test]
    fn parses_market_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451.png"), Some((2, 1)));
        assert_eq!(parse_market_name("-1_c3s2_000000.png"), Some((-1, 3)));
        assert_eq!(parse_market_name("readme.txt"), None);
        assert_eq!(parse_market_name("0002_x1.png"), None);
    }

    #[test]
    fn market_name_round_trips() {
        for (id, cam) in [(2i64, 1usize), (-1, 3), (1234, 6)] {
            let name = market_name(id, cam, 17);
            assert_eq!(parse_market_name(&name), Some((id, cam)));
        }
    }

    #[test]
    fn synthetic_cardinality_and_cameras() {
        let cfg = SynthConfig::new(10, 8, 4, 7).with_size(32, 16);
        let data = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(data.len(), 80);
        let ids: std::collections::BTreeSet<_> = data.iter().map(|s| s.identity).collect();
        assert_eq!(ids.len(), 10);
        assert!(data.iter().all(|s| s.camera < 4));
        assert!(data
            .iter()
            .all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig::new(3, 4, 2, 99).with_size(32, 16);
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_rejects_degenerate_counts() {
        assert!(generate_synthetic_dataset(&SynthConfig::new(1, 8, 2, 3)).is_err());
        assert!(generate_synthetic_dataset(&SynthConfig::new(4, 1, 2, 3)).is_err());
    }

    #[test]
    fn canonical_identities_differ_in_enough_pixels() {
        for (h, w) in [(256, 128), (32, 32)] {
            let cfg = SynthConfig::new(12, 2, 2, 5).with_size(h, w);
            let renders: Vec<_> = (0..cfg.n_ids).map(|i| render_identity(i, &cfg)).collect();
            for a in 0..renders.len() {
                for b in a + 1..renders.len() {
                    let differ = (0..h * w)
                        .filter(|&p| {
                            (0..3).any(|c| (renders[a].data()[p * 3 + c] - renders[b].data()[p * 3 + c]).abs() > 1e-3)
                        })
                        .count();
                    assert!(
                        differ as f64 >= 0.05 * (h * w) as f64,
                        "ids {a},{b} differ in only {differ} pixels at {h}x{w}"
                    );
                }
            }
        }
    }

    #[test]
    fn resize_is_deterministic_and_preserves_constants() {
        let img = ImageBuffer::filled(20, 10, 0.25);
        let r = img.resize_bilinear(7, 13);
        assert_eq!(r.height(), 7);
        assert_eq!(r.width(), 13);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let data = tiny_dataset(2, 2);
        let a = data[0].image.resize_bilinear(40, 20);
        let b = data[0].image.resize_bilinear(40, 20);
        assert_eq!(a, b);
    }

    #[test]
    fn load_dataset_parses_and_relabels() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("query");
        std::fs::create_dir_all(&split).unwrap();
        let img = ImageBuffer::filled(12, 6, 0.5);
        img.save_png(&split.join("0002_c1s1_000451.png")).unwrap();
        img.save_png(&split.join("0007_c2s1_000001.png")).unwrap();
        img.save_png(&split.join("-1_c3s2_000000.png")).unwrap();
        std::fs::write(split.join("0009_c1s1_000002.png"), b"not an image").unwrap();
        std::fs::write(split.join("notes.txt"), b"x").unwrap();

        let loaded = load_dataset(dir.path(), Split::Query, (256, 128)).unwrap();
        assert_eq!(loaded.skipped, 2);
        assert_eq!(loaded.samples.len(), 3);
        let by_raw: HashMap<i64, &PersonSample> = loaded.samples.iter().map(|s| (s.raw_id, s)).collect();
        assert_eq!(by_raw[&2].identity, 0);
        assert_eq!(by_raw[&2].camera, 1);
        assert_eq!(by_raw[&7].identity, 1);
        assert!(by_raw[&-1].is_junk);
        assert_eq!(by_raw[&-1].camera, 3);
        assert_eq!(by_raw[&-1].identity, JUNK_IDENTITY);
        assert!(loaded
            .samples
            .iter()
            .all(|s| s.image.height() == 256 && s.image.width() == 128));
    }

    #[test]
    fn load_dataset_empty_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("train")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Split::Train, (256, 128)),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn batch_of_full_size() {
        let cfg = SynthConfig::new(30, 4, 2, 1).with_size(16, 8);
        let data = generate_synthetic_dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&data, 25, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 100);
    }

    #[test]
    fn exact_cover_when_sizes_match() {
        let data = tiny_dataset(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&data, 2, 2, &mut rng).unwrap();
        let mut idx = b.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_many_identities_requested() {
        let data = tiny_dataset(10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_batch(&data, 11, 2, &mut rng).is_err());
    }

    #[test]
    fn epoch_visits_every_identity_before_repeating() {
        let data = tiny_dataset(6, 3);
        let mut sampler = PkSampler::new(&data, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = Vec::new();
        for _ in 0..sampler.batches_per_epoch() {
            let b = sampler.next_batch(&mut rng);
            let mut ids: Vec<usize> = b.samples(&data).map(|s| s.identity).collect();
            ids.dedup();
            assert_eq!(ids.len(), 2);
            seen.extend(ids);
        }
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(sampler.epoch(), 0);
        sampler.next_batch(&mut rng);
        assert_eq!(sampler.epoch(), 1);
    }

    #[test]
    fn junk_never_sampled() {
        let mut data = tiny_dataset(2, 2);
        data.push(PersonSample {
            image: data[0].image.clone(),
            identity: JUNK_IDENTITY,
            raw_id: -1,
            camera: 0,
            is_junk: true,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let b = sample_batch(&data, 2, 3, &mut rng).unwrap();
            assert!(b.indices.iter().all(|&i| i != 4));
        }
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn batches_are_balanced(n_ids in 2usize..8, per in 1usize..5, k in 1usize..5, seed in 0u64..1000) {
                let data: Vec<PersonSample> = (0..n_ids * per).map(|i| PersonSample {
                    image: ImageBuffer::filled(2, 2, 0.0),
                    identity: i / per,
                    raw_id: (i / per) as i64,
                    camera: 0,
                    is_junk: false,
                }).collect();
                let p = 1 + (seed as usize % n_ids);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = sample_batch(&data, p, k, &mut rng).unwrap();
                prop_assert_eq!(b.len(), p * k);
                let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                for s in b.samples(&data) {
                    *counts.entry(s.identity).or_default() += 1;
                }
                prop_assert_eq!(counts.len(), p);
                prop_assert!(counts.values().all(|&c| c == k));
            }
        }
    }
}
