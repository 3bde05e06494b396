//! Embedding extraction and ranking metrics.
//!
//! Protocol per query: gallery entries with the same identity and the same
//! camera are removed, as are junk entries. The rest is sorted by cosine
//! distance with ties broken by gallery index. Average precision is the mean
//! of `i / r_i` over the matches, where `r_i` is the 1-based rank of the
//! `i`-th match. Queries without any remaining match are excluded and
//! counted.

use std::str::FromStr;

use crate::autodiff::Tape;
use crate::encoder::{backbone_on_tape, global_on_tape, jigsaw_on_tape, ParameterStore};
use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, PersonSample};
use crate::model::ModelConfig;
use crate::tensor::{matmul, Real, Tensor};

/// Which features form the retrieval embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Global feature concatenated with the mean of the local features.
    Concat,
    Global,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Concat => "concat",
            FeatureMode::Global => "global",
        }
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FeatureMode::Concat),
            "global" => Ok(FeatureMode::Global),
            other => Err(Error::Config(format!("unknown eval feature '{other}'"))),
        }
    }
}

/// Unit-norm embeddings with their protocol labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    features: Tensor<f64>,
    pub ids: Vec<i64>,
    pub cameras: Vec<usize>,
    pub junk: Vec<bool>,
}

impl EmbeddingSet {
    /// Normalizes each row; zero rows are rejected.
    pub fn new(mut features: Tensor<f64>, ids: Vec<i64>, cameras: Vec<usize>, junk: Vec<bool>) -> Result<Self> {
        let n = features.rows;
        if n == 0 {
            return Err(Error::Degenerate("empty embedding set".into()));
        }
        if ids.len() != n || cameras.len() != n || junk.len() != n {
            return Err(Error::Shape(format!("{n} features with mismatched label lists")));
        }
        for r in 0..n {
            let row = features.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Degenerate(format!("feature row {r} has norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            features,
            ids,
            cameras,
            junk,
        })
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }
}

/// Eval-mode features for a batch of images, `B × D'` before normalization.
pub fn batch_features<T: Real>(
    images: &[&ImageBuffer],
    cameras: &[usize],
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    mode: FeatureMode,
) -> Result<Tensor<T>> {
    let enc = &cfg.encoder;
    let b = images.len();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let tokens = backbone_on_tape(&mut tape, params, &bound, images, cameras, enc)?;
    let g = global_on_tape(&mut tape, params, &bound, tokens, b, enc)?;
    let d = enc.dim;
    let width = match mode {
        FeatureMode::Concat => 2 * d,
        FeatureMode::Global => d,
    };
    let mut out = Tensor::zeros(b, width);
    for i in 0..b {
        out.row_mut(i)[..d].copy_from_slice(tape.value(g).row(i));
    }
    if mode == FeatureMode::Concat {
        let locals = jigsaw_on_tape(&mut tape, params, &bound, tokens, b, enc)?;
        let w = T::one() / T::c(locals.len() as f64);
        for l in locals {
            let lv = tape.value(l);
            for i in 0..b {
                for (o, &v) in out.row_mut(i)[d..].iter_mut().zip(lv.row(i)) {
                    *o = *o + w * v;
                }
            }
        }
    }
    Ok(out)
}

/// Embeds `samples` in chunks of `chunk` images. Images not at encoder size
/// are resized first.
pub fn extract_embeddings<T: Real>(
    samples: &[PersonSample],
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    mode: FeatureMode,
    chunk: usize,
) -> Result<EmbeddingSet> {
    let enc = &cfg.encoder;
    let width = match mode {
        FeatureMode::Concat => 2 * enc.dim,
        FeatureMode::Global => enc.dim,
    };
    let mut feats = Tensor::zeros(samples.len(), width);
    for (c, part) in samples.chunks(chunk.max(1)).enumerate() {
        let resized: Vec<ImageBuffer> = part
            .iter()
            .map(|s| {
                if s.image.height() == enc.height && s.image.width() == enc.width {
                    s.image.clone()
                } else {
                    s.image.resize_bilinear(enc.height, enc.width)
                }
            })
            .collect();
        let refs: Vec<&ImageBuffer> = resized.iter().collect();
        let cams: Vec<usize> = part.iter().map(|s| s.camera).collect();
        let f = batch_features(&refs, &cams, params, cfg, mode)?;
        let start = c * chunk.max(1) * width;
        for (dst, v) in feats.data[start..start + f.data.len()].iter_mut().zip(&f.data) {
            *dst = v.to_f64_lossy();
        }
    }
    EmbeddingSet::new(
        feats,
        samples.iter().map(|s| s.raw_id).collect(),
        samples.iter().map(|s| s.camera).collect(),
        samples.iter().map(|s| s.is_junk).collect(),
    )
}

/// `1 − q·g` for every query/gallery pair.
pub fn distance_matrix(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Tensor<f64>> {
    if query.features.cols != gallery.features.cols {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            query.features.cols, gallery.features.cols
        )));
    }
    Ok(matmul(&query.features, false, &gallery.features, true).map(|s| 1.0 - s))
}

/// Ranked, filtered gallery for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub order: Vec<usize>,
    pub matches: Vec<bool>,
}

/// Labels of one side of the protocol.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub ids: &'a [i64],
    pub cameras: &'a [usize],
    pub junk: &'a [bool],
}

impl<'a> From<&'a EmbeddingSet> for Labels<'a> {
    fn from(e: &'a EmbeddingSet) -> Self {
        Labels {
            ids: &e.ids,
            cameras: &e.cameras,
            junk: &e.junk,
        }
    }
}

pub fn rank_query(dist: &[f64], q_id: i64, q_cam: usize, gallery: Labels<'_>) -> RankingResult {
    let mut order: Vec<usize> = (0..dist.len())
        .filter(|&j| !gallery.junk[j] && !(gallery.ids[j] == q_id && gallery.cameras[j] == q_cam))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let matches = order.iter().map(|&j| gallery.ids[j] == q_id).collect();
    RankingResult { order, matches }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    /// `cmc[k-1]` is the fraction of valid queries with a match within rank `k`.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
    /// Per-query AP; `None` for excluded queries.
    pub ap: Vec<Option<f64>>,
}

/// Metrics from a precomputed `Q × G` distance matrix.
pub fn evaluate_distances(dist: &Tensor<f64>, query: Labels<'_>, gallery: Labels<'_>) -> Result<EvalReport> {
    let (q, g) = dist.shape();
    if query.ids.len() != q || gallery.ids.len() != g || query.cameras.len() != q || gallery.cameras.len() != g {
        return Err(Error::Shape("label lists do not match the distance matrix".into()));
    }
    let mut first_hit = vec![0usize; g.max(1)];
    let mut ap = Vec::with_capacity(q);
    let mut sum_ap = 0.0;
    let mut valid = 0usize;
    for i in 0..q {
        if query.junk[i] {
            ap.push(None);
            continue;
        }
        let r = rank_query(dist.row(i), query.ids[i], query.cameras[i], gallery);
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank0, &m) in r.matches.iter().enumerate() {
            if m {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                first.get_or_insert(rank0);
            }
        }
        match first {
            Some(f) => {
                let a = precision_sum / hits as f64;
                sum_ap += a;
                valid += 1;
                first_hit[f] += 1;
                ap.push(Some(a));
            }
            None => ap.push(None),
        }
    }
    if valid == 0 {
        return Err(Error::Degenerate("no query has a valid gallery match".into()));
    }
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for &h in first_hit.iter().take(g.max(1)) {
        acc += h;
        cmc.push(acc as f64 / valid as f64);
    }
    Ok(EvalReport {
        map: sum_ap / valid as f64,
        rank1: cmc[0],
        cmc,
        n_queries: valid,
        n_excluded: q - valid,
        ap,
    })
}

pub fn evaluate(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<EvalReport> {
    let d = distance_matrix(query, gallery)?;
    evaluate_distances(&d, query.into(), gallery.into())
}

impl EvalReport {
    /// CMC at ranks `1..=k`, extended with its last value past the gallery size.
    pub fn cmc_upto(&self, k: usize) -> Vec<f64> {
        let last = *self.cmc.last().unwrap_or(&0.0);
        (0..k).map(|i| self.cmc.get(i).copied().unwrap_or(last)).collect()
    }
}
