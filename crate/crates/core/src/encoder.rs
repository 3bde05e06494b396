//! Vision-transformer encoder shared by the supervised and contrastive
//! branches.
//!
//! Token layout for a batch of `B` images: image `b` occupies rows
//! `b·(N+1) .. (b+1)·(N+1)` of the token matrix, class token first, then
//! patches in row-major grid order. Patches are flattened in `(dy, dx, c)`
//! order, giving `3p²` inputs to the patch projection.
//!
//! Parameter names:
//!
//! | name | shape |
//! |---|---|
//! | `patch_embed.weight` / `.bias` | `D × 3p²`, `1 × D` |
//! | `cls_token` | `1 × D` |
//! | `pos_embed` | `(N+1) × D` |
//! | `sie_embed` | `n_cameras × D` |
//! | `blocks.{i}.norm1.weight` / `.bias` | `1 × D` |
//! | `blocks.{i}.attn.qkv.weight` / `.bias` | `3D × D`, `1 × 3D` |
//! | `blocks.{i}.attn.proj.weight` / `.bias` | `D × D`, `1 × D` |
//! | `blocks.{i}.norm2.weight` / `.bias` | `1 × D` |
//! | `blocks.{i}.mlp.fc1.weight` / `.bias` | `rD × D`, `1 × rD` |
//! | `blocks.{i}.mlp.fc2.weight` / `.bias` | `D × rD`, `1 × D` |
//! | `norm.weight` / `.bias` | `1 × D` |
//!
//! Blocks `0..l−1` form the backbone; block `l−1` is the last layer, shared
//! by the global and jigsaw branches.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub jigsaw_groups: usize,
    pub jigsaw_shift: usize,
    pub sie_coefficient: f64,
    pub n_cameras: usize,
    /// When false the patch projection is excluded from optimization.
    pub learn_patch_proj: bool,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            stride: 8,
            dim: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            jigsaw_groups: 2,
            jigsaw_shift: 5,
            sie_coefficient: 3.0,
            n_cameras: 4,
            learn_patch_proj: false,
        }
    }

    pub fn vit_base() -> Self {
        Self {
            height: 256,
            width: 128,
            patch: 16,
            stride: 16,
            dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            jigsaw_groups: 4,
            jigsaw_shift: 5,
            sie_coefficient: 3.0,
            n_cameras: 6,
            learn_patch_proj: false,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            (self.height - self.patch) / self.stride + 1,
            (self.width - self.patch) / self.stride + 1,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.stride == 0 {
            return bad("patch size and stride must be positive".into());
        }
        if self.patch > self.height || self.patch > self.width {
            return bad(format!(
                "patch {} larger than image {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.layers < 2 {
            return bad(format!("need at least 2 layers, got {}", self.layers));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.jigsaw_groups == 0 || self.jigsaw_groups > self.num_patches() {
            return bad(format!(
                "jigsaw groups {} must be in 1..={}",
                self.jigsaw_groups,
                self.num_patches()
            ));
        }
        if self.n_cameras == 0 {
            return bad("n_cameras must be positive".into());
        }
        if !self.sie_coefficient.is_finite() {
            return bad("sie_coefficient must be finite".into());
        }
        Ok(())
    }
}

/// What a parameter is, for weight-decay and serialization purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    /// Non-trainable running statistics.
    Buffer,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::Embedding => 3,
            ParamKind::Buffer => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::Embedding,
            4 => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, trainable: bool, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            trainable,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Index of a parameter that must exist.
    pub fn require(&self, name: &str) -> Result<usize> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn trainable_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.norm_sq().to_f64_lossy())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    trainable: p.trainable,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every non-buffer parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| (p.kind != ParamKind::Buffer).then(|| tape.leaf(p.value.clone())))
                .collect(),
        )
    }
}

/// Tape handles for a [`ParameterStore`], indexed like the store.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Option<Var>>);

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.0[id].expect("buffers are not bound")
    }

    pub fn get(&self, id: usize) -> Option<Var> {
        self.0[id]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Truncated normal at ±2σ by rejection.
pub(crate) fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::c(z * std);
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub(crate) const INIT_STD: f64 = 0.02;

/// Encoder parameters with truncated-normal weights and embeddings, zero
/// biases, unit normalization scales. Deterministic in `seed`.
pub fn init_parameters<T: Real>(cfg: &EncoderConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    add_encoder_parameters(&mut s, cfg, &mut rng);
    Ok(s)
}

pub(crate) fn add_encoder_parameters<T: Real>(s: &mut ParameterStore<T>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    let hidden = cfg.mlp_ratio * d;
    let learn = cfg.learn_patch_proj;
    s.insert(
        "patch_embed.weight",
        ParamKind::Weight,
        learn,
        trunc_normal(rng, d, cfg.patch_dim(), INIT_STD),
    );
    s.insert("patch_embed.bias", ParamKind::Bias, learn, Tensor::zeros(1, d));
    s.insert(
        "cls_token",
        ParamKind::Embedding,
        true,
        trunc_normal(rng, 1, d, INIT_STD),
    );
    s.insert(
        "pos_embed",
        ParamKind::Embedding,
        true,
        trunc_normal(rng, cfg.num_patches() + 1, d, INIT_STD),
    );
    s.insert(
        "sie_embed",
        ParamKind::Embedding,
        true,
        trunc_normal(rng, cfg.n_cameras, d, INIT_STD),
    );
    for i in 0..cfg.layers {
        let p = format!("blocks.{i}");
        s.insert(format!("{p}.norm1.weight"), ParamKind::Norm, true, ones(d));
        s.insert(format!("{p}.norm1.bias"), ParamKind::Norm, true, Tensor::zeros(1, d));
        s.insert(
            format!("{p}.attn.qkv.weight"),
            ParamKind::Weight,
            true,
            trunc_normal(rng, 3 * d, d, INIT_STD),
        );
        s.insert(
            format!("{p}.attn.qkv.bias"),
            ParamKind::Bias,
            true,
            Tensor::zeros(1, 3 * d),
        );
        s.insert(
            format!("{p}.attn.proj.weight"),
            ParamKind::Weight,
            true,
            trunc_normal(rng, d, d, INIT_STD),
        );
        s.insert(
            format!("{p}.attn.proj.bias"),
            ParamKind::Bias,
            true,
            Tensor::zeros(1, d),
        );
        s.insert(format!("{p}.norm2.weight"), ParamKind::Norm, true, ones(d));
        s.insert(format!("{p}.norm2.bias"), ParamKind::Norm, true, Tensor::zeros(1, d));
        s.insert(
            format!("{p}.mlp.fc1.weight"),
            ParamKind::Weight,
            true,
            trunc_normal(rng, hidden, d, INIT_STD),
        );
        s.insert(
            format!("{p}.mlp.fc1.bias"),
            ParamKind::Bias,
            true,
            Tensor::zeros(1, hidden),
        );
        s.insert(
            format!("{p}.mlp.fc2.weight"),
            ParamKind::Weight,
            true,
            trunc_normal(rng, d, hidden, INIT_STD),
        );
        s.insert(format!("{p}.mlp.fc2.bias"), ParamKind::Bias, true, Tensor::zeros(1, d));
    }
    s.insert("norm.weight", ParamKind::Norm, true, ones(d));
    s.insert("norm.bias", ParamKind::Norm, true, Tensor::zeros(1, d));
}

pub(crate) fn ones<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_vec(1, n, vec![T::one(); n])
}

/// `N × 3p²` matrix of flattened patches.
/// Pixels enter the patch projection as `(v − PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

pub fn extract_patches<T: Real>(img: &ImageBuffer, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::Shape(format!(
            "image {}x{} does not match encoder input {}x{}",
            img.height(),
            img.width(),
            cfg.height,
            cfg.width
        )));
    }
    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let mut out = Tensor::zeros(gh * gw, cfg.patch_dim());
    let data = img.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for dy in 0..p {
                let y = gy * cfg.stride + dy;
                let src = &data[(y * cfg.width + gx * cfg.stride) * 3..(y * cfg.width + gx * cfg.stride + p) * 3];
                for (dst, &v) in row[dy * p * 3..(dy + 1) * p * 3].iter_mut().zip(src) {
                    *dst = T::c((v as f64 - PIXEL_MEAN) / PIXEL_STD);
                }
            }
        }
    }
    Ok(out)
}

/// Patch embeddings of one image, `N × D`.
pub fn patch_embed<T: Real>(img: &ImageBuffer, params: &ParameterStore<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let patches = extract_patches(img, cfg)?;
    let mut tape = Tape::new();
    let x = tape.leaf(patches);
    let w = tape.leaf(params.value(params.require("patch_embed.weight")?).clone());
    let b = tape.leaf(params.value(params.require("patch_embed.bias")?).clone());
    let y = tape.linear(x, w, Some(b));
    Ok(tape.value(y).clone())
}

struct BlockIds {
    n1w: usize,
    n1b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    n2w: usize,
    n2b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

impl BlockIds {
    fn lookup<T: Real>(s: &ParameterStore<T>, i: usize) -> Result<Self> {
        let g = |n: &str| s.require(&format!("blocks.{i}.{n}"));
        Ok(Self {
            n1w: g("norm1.weight")?,
            n1b: g("norm1.bias")?,
            qkv_w: g("attn.qkv.weight")?,
            qkv_b: g("attn.qkv.bias")?,
            proj_w: g("attn.proj.weight")?,
            proj_b: g("attn.proj.bias")?,
            n2w: g("norm2.weight")?,
            n2b: g("norm2.bias")?,
            fc1_w: g("mlp.fc1.weight")?,
            fc1_b: g("mlp.fc1.bias")?,
            fc2_w: g("mlp.fc2.weight")?,
            fc2_b: g("mlp.fc2.bias")?,
        })
    }
}

/// Pre-norm transformer block over independent sequences.
fn block<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    layer: usize,
    x: Var,
    heads: usize,
    segments: &[usize],
) -> Result<Var> {
    let id = BlockIds::lookup(s, layer)?;
    let h = tape.layer_norm(x, b.var(id.n1w), b.var(id.n1b));
    let qkv = tape.linear(h, b.var(id.qkv_w), Some(b.var(id.qkv_b)));
    let a = tape.attention(qkv, heads, segments);
    let a = tape.linear(a, b.var(id.proj_w), Some(b.var(id.proj_b)));
    let x = tape.add(x, a);
    let h = tape.layer_norm(x, b.var(id.n2w), b.var(id.n2b));
    let h = tape.linear(h, b.var(id.fc1_w), Some(b.var(id.fc1_b)));
    let h = tape.gelu(h);
    let h = tape.linear(h, b.var(id.fc2_w), Some(b.var(id.fc2_b)));
    Ok(tape.add(x, h))
}

/// Token matrix after the first `l−1` blocks for a batch of images,
/// `B·(N+1) × D`.
pub fn backbone_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    images: &[&ImageBuffer],
    cameras: &[usize],
    cfg: &EncoderConfig,
) -> Result<Var> {
    if images.len() != cameras.len() || images.is_empty() {
        return Err(Error::Shape(format!(
            "{} images with {} cameras",
            images.len(),
            cameras.len()
        )));
    }
    if let Some(&c) = cameras.iter().find(|&&c| c >= cfg.n_cameras) {
        return Err(Error::InvalidArgument(format!(
            "camera {c} out of range for {} cameras",
            cfg.n_cameras
        )));
    }
    let n = cfg.num_patches();
    let bsz = images.len();
    let mut patches = Tensor::zeros(bsz * n, cfg.patch_dim());
    for (i, img) in images.iter().enumerate() {
        let p: Tensor<T> = extract_patches(img, cfg)?;
        patches.data[i * n * p.cols..(i + 1) * n * p.cols].copy_from_slice(&p.data);
    }
    let x = tape.leaf(patches);
    let emb = tape.linear(
        x,
        b.var(s.require("patch_embed.weight")?),
        Some(b.var(s.require("patch_embed.bias")?)),
    );
    let with_cls = tape.concat_rows(&[b.var(s.require("cls_token")?), emb]);
    let mut order = Vec::with_capacity(bsz * (n + 1));
    let mut pos_idx = Vec::with_capacity(bsz * (n + 1));
    let mut cam_idx = Vec::with_capacity(bsz * (n + 1));
    for (i, &cam) in cameras.iter().enumerate() {
        order.push(0);
        order.extend((0..n).map(|j| 1 + i * n + j));
        pos_idx.extend(0..=n);
        cam_idx.extend(std::iter::repeat_n(cam, n + 1));
    }
    let tokens = tape.gather_rows(with_cls, order);
    let pos = tape.gather_rows(b.var(s.require("pos_embed")?), pos_idx);
    let mut x = tape.add(tokens, pos);
    if cfg.sie_coefficient != 0.0 {
        let sie = tape.gather_rows(b.var(s.require("sie_embed")?), cam_idx);
        let sie = tape.scale(sie, T::c(cfg.sie_coefficient));
        x = tape.add(x, sie);
    }
    let segments = vec![n + 1; bsz];
    for layer in 0..cfg.layers - 1 {
        x = block(tape, s, b, layer, x, cfg.heads, &segments)?;
    }
    Ok(x)
}

/// Class-token rows of a token matrix, `B × D`.
pub fn class_tokens<T: Real>(tape: &mut Tape<T>, tokens: Var, batch: usize, cfg: &EncoderConfig) -> Var {
    let n1 = cfg.num_patches() + 1;
    tape.gather_rows(tokens, (0..batch).map(|i| i * n1).collect())
}

fn final_norm<T: Real>(tape: &mut Tape<T>, s: &ParameterStore<T>, b: &Bound, x: Var) -> Result<Var> {
    Ok(tape.layer_norm(x, b.var(s.require("norm.weight")?), b.var(s.require("norm.bias")?)))
}

/// Global features `B × D`: last block on the full sequence, final norm,
/// class token.
pub fn global_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    tokens: Var,
    batch: usize,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let n1 = cfg.num_patches() + 1;
    let out = block(tape, s, b, cfg.layers - 1, tokens, cfg.heads, &vec![n1; batch])?;
    let cls = class_tokens(tape, out, batch, cfg);
    final_norm(tape, s, b, cls)
}

/// Original patch indices of each jigsaw group: cyclic shift, then token
/// `j` of the shifted order joins group `j mod K`.
pub fn jigsaw_groups(n: usize, k: usize, shift: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} patches into {k} groups"
        )));
    }
    let mut groups = vec![Vec::with_capacity(n.div_ceil(k)); k];
    for j in 0..n {
        groups[j % k].push((j + shift) % n);
    }
    Ok(groups)
}

/// Local features, one `B × D` matrix per jigsaw group. Each group is
/// prefixed with the class token and passed through the same last block as
/// the global branch.
pub fn jigsaw_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    tokens: Var,
    batch: usize,
    cfg: &EncoderConfig,
) -> Result<Vec<Var>> {
    let n = cfg.num_patches();
    let groups = jigsaw_groups(n, cfg.jigsaw_groups, cfg.jigsaw_shift)?;
    let mut order = Vec::with_capacity(batch * (n + groups.len()));
    let mut segments = Vec::with_capacity(batch * groups.len());
    let mut cls_rows = vec![Vec::with_capacity(batch); groups.len()];
    for i in 0..batch {
        let base = i * (n + 1);
        for (k, g) in groups.iter().enumerate() {
            cls_rows[k].push(order.len());
            order.push(base);
            order.extend(g.iter().map(|&j| base + 1 + j));
            segments.push(g.len() + 1);
        }
    }
    let regrouped = tape.gather_rows(tokens, order);
    let out = block(tape, s, b, cfg.layers - 1, regrouped, cfg.heads, &segments)?;
    let mut locals = Vec::with_capacity(groups.len());
    for rows in cls_rows {
        let cls = tape.gather_rows(out, rows);
        locals.push(final_norm(tape, s, b, cls)?);
    }
    Ok(locals)
}

/// Features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub f_g: Vec<T>,
    /// `K × D`.
    pub f_l: Tensor<T>,
    /// Token sequence entering the last block, `(N+1) × D`.
    pub tokens: Tensor<T>,
}

pub fn forward_backbone<T: Real>(
    img: &ImageBuffer,
    camera: usize,
    params: &ParameterStore<T>,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let t = backbone_on_tape(&mut tape, params, &b, &[img], &[camera], cfg)?;
    Ok(tape.value(t).clone())
}

fn tokens_on_tape<T: Real>(
    tokens: &Tensor<T>,
    params: &ParameterStore<T>,
    cfg: &EncoderConfig,
) -> Result<(Tape<T>, Bound, Var)> {
    if tokens.shape() != (cfg.num_patches() + 1, cfg.dim) {
        return Err(Error::Shape(format!(
            "token matrix {:?}, expected {:?}",
            tokens.shape(),
            (cfg.num_patches() + 1, cfg.dim)
        )));
    }
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let t = tape.leaf(tokens.clone());
    Ok((tape, b, t))
}

pub fn global_branch<T: Real>(tokens: &Tensor<T>, params: &ParameterStore<T>, cfg: &EncoderConfig) -> Result<Vec<T>> {
    let (mut tape, b, t) = tokens_on_tape(tokens, params, cfg)?;
    let g = global_on_tape(&mut tape, params, &b, t, 1, cfg)?;
    Ok(tape.value(g).data.clone())
}

pub fn jigsaw_branch<T: Real>(
    tokens: &Tensor<T>,
    params: &ParameterStore<T>,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    let (mut tape, b, t) = tokens_on_tape(tokens, params, cfg)?;
    let locals = jigsaw_on_tape(&mut tape, params, &b, t, 1, cfg)?;
    let k = locals.len();
    let data = locals.iter().flat_map(|&v| tape.value(v).data.clone()).collect();
    Ok(Tensor::from_vec(k, cfg.dim, data))
}

pub fn encode<T: Real>(
    img: &ImageBuffer,
    camera: usize,
    params: &ParameterStore<T>,
    cfg: &EncoderConfig,
) -> Result<FeatureBundle<T>> {
    let tokens = forward_backbone(img, camera, params, cfg)?;
    let f_g = global_branch(&tokens, params, cfg)?;
    let f_l = jigsaw_branch(&tokens, params, cfg)?;
    Ok(FeatureBundle { f_g, f_l, tokens })
}

/// Uniform random image, handy for tests and benchmarks.
pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageBuffer {
    let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
    ImageBuffer::new(h, w, data).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig::toy()
    }

    #[test]
    fn patch_counts() {
        let mut c = EncoderConfig::vit_base();
        assert_eq!(c.num_patches(), 128);
        c.stride = 12;
        assert_eq!(c.num_patches(), 210);
    }

    #[test]
    fn mean_gray_image_embeds_to_bias() {
        let cfg = toy();
        let mut p = init_parameters::<f64>(&cfg, 0).unwrap();
        let bias: Vec<f64> = (0..cfg.dim).map(|i| i as f64 * 0.1).collect();
        p.get_mut("patch_embed.bias").unwrap().value = Tensor::row_vector(bias.clone());
        let e = patch_embed(&ImageBuffer::filled(32, 32, PIXEL_MEAN as f32), &p, &cfg).unwrap();
        for r in 0..e.rows {
            assert_eq!(e.row(r), &bias[..]);
        }
        assert!(patch_embed(&ImageBuffer::filled(16, 32, 0.0), &p, &cfg).is_err());
    }

    #[test]
    fn init_is_deterministic_and_freezes_patch_projection() {
        let cfg = toy();
        let a = init_parameters::<f32>(&cfg, 3).unwrap();
        let b = init_parameters::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let frozen: Vec<&str> = a
            .params()
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(frozen, ["patch_embed.weight", "patch_embed.bias"]);
        for p in a
            .params()
            .iter()
            .filter(|p| p.name.ends_with("norm1.weight") || p.name == "norm.weight")
        {
            assert!(p.value.data.iter().all(|&v| v == 1.0));
        }
        for p in a.params().iter().filter(|p| p.kind == ParamKind::Weight) {
            assert!(p.value.data.iter().all(|v| v.abs() <= 0.04));
        }
    }

    #[test]
    fn jigsaw_grouping_rule() {
        let g = jigsaw_groups(8, 4, 1).unwrap();
        assert_eq!(g, vec![vec![1, 5], vec![2, 6], vec![3, 7], vec![4, 0]]);
        let g = jigsaw_groups(7, 3, 0).unwrap();
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), [3, 2, 2]);
        assert!(jigsaw_groups(4, 5, 0).is_err());
    }

    #[test]
    fn sie_zero_ignores_camera() {
        let mut cfg = toy();
        cfg.sie_coefficient = 0.0;
        let p = init_parameters::<f64>(&cfg, 1).unwrap();
        let img = random_image(32, 32, &mut ChaCha8Rng::seed_from_u64(2));
        let a = forward_backbone(&img, 0, &p, &cfg).unwrap();
        let b = forward_backbone(&img, 3, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows, cfg.num_patches() + 1);
        assert!(forward_backbone(&img, 4, &p, &cfg).is_err());
        cfg.sie_coefficient = 3.0;
        let c = forward_backbone(&img, 0, &p, &cfg).unwrap();
        let d = forward_backbone(&img, 3, &p, &cfg).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn single_group_jigsaw_equals_global() {
        let mut cfg = toy();
        cfg.jigsaw_groups = 1;
        cfg.jigsaw_shift = 0;
        let p = init_parameters::<f64>(&cfg, 4).unwrap();
        let img = random_image(32, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let f = encode(&img, 1, &p, &cfg).unwrap();
        assert_eq!(f.f_l.row(0), &f.f_g[..]);
    }

    #[test]
    fn permuting_within_a_group_keeps_its_feature() {
        let cfg = toy();
        let p = init_parameters::<f64>(&cfg, 6).unwrap();
        let img = random_image(32, 32, &mut ChaCha8Rng::seed_from_u64(7));
        let tokens = forward_backbone(&img, 0, &p, &cfg).unwrap();
        let base = jigsaw_branch(&tokens, &p, &cfg).unwrap();
        // Swap two patches belonging to group 0.
        let g = &jigsaw_groups(cfg.num_patches(), cfg.jigsaw_groups, cfg.jigsaw_shift).unwrap()[0];
        let (a, b) = (1 + g[0], 1 + g[1]);
        let mut swapped = tokens.clone();
        let ra = tokens.row(a).to_vec();
        swapped.row_mut(a).copy_from_slice(tokens.row(b));
        swapped.row_mut(b).copy_from_slice(&ra);
        let out = jigsaw_branch(&swapped, &p, &cfg).unwrap();
        for (x, y) in out.row(0).iter().zip(base.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn last_block_is_shared() {
        let cfg = toy();
        let mut p = init_parameters::<f64>(&cfg, 8).unwrap();
        let img = random_image(32, 32, &mut ChaCha8Rng::seed_from_u64(9));
        let before = encode(&img, 0, &p, &cfg).unwrap();
        let name = format!("blocks.{}.mlp.fc2.bias", cfg.layers - 1);
        p.get_mut(&name).unwrap().value.data[0] += 0.5;
        let after = encode(&img, 0, &p, &cfg).unwrap();
        assert_eq!(before.tokens, after.tokens);
        assert_ne!(before.f_g, after.f_g);
        assert_ne!(before.f_l, after.f_l);
    }

    #[test]
    fn forward_is_finite_in_f32() {
        let cfg = toy();
        let p = init_parameters::<f32>(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let f = encode(&random_image(32, 32, &mut rng), 2, &p, &cfg).unwrap();
            assert!(f.f_g.iter().all(|v| v.is_finite()) && f.f_l.all_finite());
            assert_eq!(f.f_l.rows, cfg.jigsaw_groups);
        }
        let ones = encode(&ImageBuffer::filled(32, 32, 1.0), 0, &p, &cfg).unwrap();
        assert!(ones.f_l.all_finite());
    }

    #[test]
    fn config_validation() {
        let mut c = toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.layers = 1;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.jigsaw_groups = 17;
        assert!(c.validate().is_err());
    }
}
