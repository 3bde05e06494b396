//! Joint training: augmentation of both views, the weighted objective,
//! momentum SGD on a cosine schedule.
//!
//! Each step draws from its own RNG stream, `ChaCha8(seed)` on stream
//! `step + 1`, so a run is reproducible from `(config, seed)` and can be
//! resumed from a checkpoint by replaying only the batch sampler.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{normal_pipeline, strong_pipeline};
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::TrainConfig;
use crate::encoder::ParameterStore;
use crate::error::{Error, Result};
use crate::imaging::{DatasetSplits, ImageBuffer, PersonSample, PkSampler};
use crate::model::{build_loss, decays, init_model, LossBreakdown, Objective, Targets, ViewBatch};
use crate::retrieval::{evaluate, extract_embeddings, EvalReport};
use crate::tensor::Tensor;

/// `v ← m·v + g + wd·p; p ← p − lr·v` for every trainable parameter.
/// Weight decay applies to weight matrices only.
pub fn sgd_step(
    params: &mut ParameterStore<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape("gradient list does not match parameters".into()));
    }
    let (lr, m) = (lr as f32, momentum as f32);
    for ((p, g), v) in params.params_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        if !p.trainable {
            continue;
        }
        let (Some(g), Some(v)) = (g, v.as_mut()) else {
            return Err(Error::Shape(format!("missing gradient or buffer for {}", p.name)));
        };
        if g.shape() != p.value.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
        }
        let wd = if decays(p.kind) { weight_decay as f32 } else { 0.0 };
        for ((x, &gi), vi) in p.value.data.iter_mut().zip(&g.data).zip(&mut v.data) {
            *vi = m * *vi + gi + wd * *x;
            *x -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    let t = if total_steps == 0 {
        1.0
    } else {
        step.min(total_steps) as f64 / total_steps as f64
    };
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear warmup to `base_lr` over `warmup` steps, cosine decay afterwards.
pub fn scheduled_lr(step: usize, total: usize, warmup: usize, base_lr: f64, min_lr: f64) -> f64 {
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else {
        cosine_lr(step - warmup, total - warmup, base_lr, min_lr)
    }
}

/// Fills in dataset-dependent fields (`num_classes`, `n_cameras`).
pub fn resolve_config(cfg: &TrainConfig, train: &[PersonSample]) -> Result<TrainConfig> {
    cfg.validate()?;
    let usable: Vec<&PersonSample> = train.iter().filter(|s| !s.is_junk).collect();
    if usable.is_empty() {
        return Err(Error::Dataset("training split has no labelled samples".into()));
    }
    let mut out = cfg.clone();
    let classes = usable.iter().map(|s| s.identity).max().unwrap_or(0) + 1;
    let cams = usable.iter().map(|s| s.camera).max().unwrap_or(0) + 1;
    let h = &mut out.model.heads;
    if h.num_classes == 0 {
        h.num_classes = classes;
    } else if h.num_classes < classes {
        return Err(Error::Config(format!(
            "num_classes {} below the {classes} identities",
            h.num_classes
        )));
    }
    let e = &mut out.model.encoder;
    if e.n_cameras == 0 {
        e.n_cameras = cams;
    } else if e.n_cameras < cams {
        return Err(Error::Config(format!(
            "n_cameras {} below camera id {}",
            e.n_cameras,
            cams - 1
        )));
    }
    out.model.validate()?;
    Ok(out)
}

fn at_size(img: &ImageBuffer, h: usize, w: usize) -> ImageBuffer {
    if img.height() == h && img.width() == w {
        img.clone()
    } else {
        img.resize_bilinear(h, w)
    }
}

/// Augmented views for a list of samples.
pub fn prepare_views(samples: &[&PersonSample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ViewBatch> {
    let enc = &cfg.model.encoder;
    let mut normal = Vec::with_capacity(samples.len());
    let mut strong = cfg.uses_strong_view().then(|| Vec::with_capacity(samples.len()));
    for s in samples {
        let img = at_size(&s.image, enc.height, enc.width);
        normal.push(normal_pipeline(&img, &cfg.normal, rng));
        if let Some(v) = strong.as_mut() {
            v.push(strong_pipeline(&img, &cfg.strong, rng)?.0);
        }
    }
    Ok(ViewBatch {
        normal,
        strong,
        labels: samples.iter().map(|s| s.identity).collect(),
        cameras: samples.iter().map(|s| s.camera).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        let c = l.contrastive.map(|c| format!("{c:.6}")).unwrap_or_else(|| "na".into());
        format!(
            "step={} epoch={} lr={:.6e} loss={:.6} id_global={:.6} id_local={:.6} tri_global={:.6} tri_local={:.6} contrastive={} grad_norm={:.6}",
            self.step, self.epoch, self.lr, l.total, l.id_global, l.id_local, l.tri_global, l.tri_local, c, self.grad_norm
        )
    }
}

/// One optimization step on a prepared batch. Returns the loss terms and
/// the gradient norm before clipping.
pub fn train_step(
    params: &mut ParameterStore<f32>,
    opt: &mut OptimizerState,
    views: &ViewBatch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossBreakdown, f64)> {
    let graph = build_loss(
        params,
        &cfg.model,
        views,
        cfg.lambda,
        &Targets::StopGradient,
        Objective::Joint,
    )?;
    let loss = graph.breakdown();
    let mut grads = graph.param_grads(params);
    let grad_norm = grads.iter().flatten().map(|g| g.norm_sq() as f64).sum::<f64>().sqrt();
    if !loss.total.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step: opt.step,
            param_norm: params.trainable_norm(),
            grad_norm,
        });
    }
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let s = (cfg.grad_clip / grad_norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    graph.update_bnneck(params, cfg.model.heads.bnneck_momentum)?;
    sgd_step(params, &grads, opt, lr, cfg.momentum, cfg.weight_decay)?;
    Ok((loss, grad_norm))
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Owns the mutable training state.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub params: ParameterStore<f32>,
    pub opt: OptimizerState,
    data: &'a [PersonSample],
    sampler: PkSampler,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a [PersonSample], cfg: &TrainConfig) -> Result<Self> {
        let cfg = resolve_config(cfg, data)?;
        let sampler = PkSampler::new(data, cfg.batch_p, cfg.batch_k)?;
        if sampler.batches_per_epoch() == 0 {
            return Err(Error::Dataset("not enough identities for one batch".into()));
        }
        let params = init_model(&cfg.model, cfg.seed)?;
        let opt = OptimizerState::new(&params);
        Ok(Self {
            cfg,
            params,
            opt,
            data,
            sampler,
        })
    }

    /// Continues from a checkpoint written by this configuration.
    pub fn resume(data: &'a [PersonSample], ckpt: Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ckpt.config_text)?;
        let mut t = Self::new(data, &cfg)?;
        let fresh: Vec<(&str, (usize, usize))> = t
            .params
            .params()
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        let stored: Vec<(&str, (usize, usize))> = ckpt
            .params
            .params()
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        if fresh != stored {
            return Err(Error::Checkpoint(
                "parameter layout differs from the configuration".into(),
            ));
        }
        for step in 0..ckpt.optimizer.step {
            t.sampler.next_batch(&mut step_rng(t.cfg.seed, step));
        }
        t.params = ckpt.params;
        t.opt = ckpt.optimizer;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.opt.step as usize >= self.total_steps()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.opt.step;
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = self.sampler.next_batch(&mut rng);
        let samples: Vec<&PersonSample> = batch.samples(self.data).collect();
        let views = prepare_views(&samples, &self.cfg, &mut rng)?;
        let spe = self.steps_per_epoch();
        let lr = scheduled_lr(
            step as usize,
            self.total_steps(),
            self.cfg.warmup_epochs * spe,
            self.cfg.base_lr,
            self.cfg.min_lr(),
        );
        let (loss, grad_norm) = train_step(&mut self.params, &mut self.opt, &views, &self.cfg, lr)?;
        Ok(StepReport {
            step,
            epoch: step as usize / spe,
            lr,
            loss,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.cfg.to_text(),
            params: self.params.clone(),
            optimizer: self.opt.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub cfg: TrainConfig,
    pub params: ParameterStore<f32>,
    pub opt: OptimizerState,
    pub log: Vec<String>,
}

/// Runs to completion. With `out_dir`, writes `checkpoint.ckpt`,
/// `train.log`, and `checkpoint_epoch<N>.ckpt` every
/// `checkpoint_interval` epochs. Log lines are also sent to `log_sink`.
pub fn train(
    data: &[PersonSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    log_sink: &mut dyn Write,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, cfg)?;
    let spe = t.steps_per_epoch();
    let mut log = Vec::with_capacity(t.total_steps());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while !t.is_done() {
        let r = t.step()?;
        let line = r.log_line();
        writeln!(log_sink, "{line}").map_err(|e| Error::io("<log>", e))?;
        log.push(line);
        let finished_epoch = (r.step as usize + 1).is_multiple_of(spe);
        if let (Some(dir), true) = (out_dir, finished_epoch && t.cfg.checkpoint_interval > 0) {
            let epoch = (r.step as usize + 1) / spe;
            if epoch.is_multiple_of(t.cfg.checkpoint_interval) && !t.is_done() {
                t.checkpoint()
                    .save(&dir.join(format!("checkpoint_epoch{epoch}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        t.checkpoint().save(&dir.join("checkpoint.ckpt"))?;
        let text: String = log.iter().map(|l| format!("{l}\n")).collect();
        let p = dir.join("train.log");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        cfg: t.cfg,
        params: t.params,
        opt: t.opt,
        log,
    })
}

/// Embeds query and gallery with trained parameters and scores them.
pub fn evaluate_model(
    params: &ParameterStore<f32>,
    cfg: &TrainConfig,
    query: &[PersonSample],
    gallery: &[PersonSample],
) -> Result<EvalReport> {
    let q = extract_embeddings(query, params, &cfg.model, cfg.eval_feature, 64)?;
    let g = extract_embeddings(gallery, params, &cfg.model, cfg.eval_feature, 64)?;
    evaluate(&q, &g)
}

/// λ values of the balance sweep.
pub const LAMBDA_GRID: [f64; 8] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.93, 0.95, 0.97];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Lambda,
    /// Frozen versus learned patch projection.
    PatchProjection,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Sweep::Lambda),
            "patch_proj" => Ok(Sweep::PatchProjection),
            other => Err(Error::Config(format!(
                "unknown sweep '{other}' (expected lambda or patch_proj)"
            ))),
        }
    }
}

/// The configurations a sweep trains, each with a short label.
pub fn sweep_settings(base: &TrainConfig, sweep: Sweep) -> Vec<(String, TrainConfig)> {
    match sweep {
        Sweep::Lambda => LAMBDA_GRID
            .iter()
            .map(|&l| {
                let mut c = base.clone();
                c.lambda = l;
                (format!("lambda={l}"), c)
            })
            .collect(),
        Sweep::PatchProjection => [false, true]
            .iter()
            .map(|&learn| {
                let mut c = base.clone();
                c.model.encoder.learn_patch_proj = learn;
                let name = if learn { "learned" } else { "frozen" };
                (format!("patch_proj={name}"), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub label: String,
    pub cfg: TrainConfig,
    pub report: EvalReport,
    pub final_loss: f64,
}

/// Trains and evaluates every setting of `sweep`. With `out_dir`, each
/// setting gets its own subdirectory named after its label.
pub fn run_sweep(
    splits: &DatasetSplits,
    base: &TrainConfig,
    sweep: Sweep,
    out_dir: Option<&Path>,
    log_sink: &mut dyn Write,
) -> Result<Vec<SweepResult>> {
    let mut out = Vec::new();
    for (label, cfg) in sweep_settings(base, sweep) {
        writeln!(log_sink, "# setting {label}").map_err(|e| Error::io("<log>", e))?;
        let dir = out_dir.map(|d| d.join(label.replace('=', "_")));
        let run = train(&splits.train, &cfg, dir.as_deref(), log_sink)?;
        let report = evaluate_model(&run.params, &run.cfg, &splits.query, &splits.gallery)?;
        let final_loss = run
            .log
            .last()
            .and_then(|l| l.split(' ').find_map(|kv| kv.strip_prefix("loss=")))
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN);
        out.push(SweepResult {
            label,
            cfg: run.cfg,
            report,
            final_loss,
        });
    }
    Ok(out)
}
