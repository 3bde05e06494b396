//! The full network: one parameter store read by both views, the supervised
//! heads on the normal view, and the contrastive heads on both views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{
    add_encoder_parameters, backbone_on_tape, class_tokens, global_on_tape, jigsaw_on_tape, Bound, EncoderConfig,
    ParamKind, ParameterStore,
};
use crate::error::{Error, Result};
use crate::heads::{
    add_head_parameters, classify_on_tape, predictor_on_tape, projector_on_tape, update_running_stats, HeadConfig,
};
use crate::imaging::ImageBuffer;
use crate::losses::{
    contrastive_against, contrastive_loss, joint_loss, supervised_loss, validate_lambda, SupervisedTerms,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()
    }

    /// Number of supervised streams: global plus one per jigsaw group.
    pub fn streams(&self) -> usize {
        1 + self.encoder.jigsaw_groups
    }
}

/// Encoder and head parameters drawn from one seeded stream.
pub fn init_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    add_encoder_parameters(&mut s, &cfg.encoder, &mut rng);
    add_head_parameters(&mut s, cfg.encoder.dim, cfg.streams(), &cfg.heads, &mut rng);
    Ok(s)
}

/// One training batch after augmentation. Images are at encoder size.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub normal: Vec<ImageBuffer>,
    /// `None` disables the contrastive branch.
    pub strong: Option<Vec<ImageBuffer>>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// How the contrastive targets enter the objective.
#[derive(Clone, Debug)]
pub enum Targets<T> {
    /// Projections behind stop-gradient nodes (the training objective).
    StopGradient,
    /// Fixed `(z1, z2)` supplied as constants: the surrogate whose plain
    /// derivative equals the stop-gradient objective's gradient.
    Frozen(Tensor<T>, Tensor<T>),
}

/// Which objective to place at the root of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Triplet loss of the global stream only.
    GlobalTriplet,
    Supervised,
    Contrastive,
    Joint,
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveVars {
    pub z1: Var,
    pub z2: Var,
    pub p1: Var,
    pub p2: Var,
    pub loss: Var,
}

/// A recorded forward pass and handles to its interesting nodes.
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub bound: Bound,
    pub supervised: SupervisedTerms,
    pub contrastive: Option<ContrastiveVars>,
    pub total: Var,
    pub root: Var,
    /// Strong-view input tokens (for stop-gradient probes).
    pub tokens: Var,
    bnneck: Vec<(usize, Var)>,
    batch: usize,
}

/// Scalar values of each loss component.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub id_global: f64,
    pub id_local: f64,
    pub tri_global: f64,
    pub tri_local: f64,
    pub contrastive: Option<f64>,
}

impl<T: Real> LossGraph<T> {
    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.value(v).item().to_f64_lossy()
    }

    pub fn breakdown(&self) -> LossBreakdown {
        let s = &self.supervised;
        LossBreakdown {
            total: self.scalar(self.total),
            supervised: self.scalar(s.total),
            id_global: self.scalar(s.id_global),
            id_local: self.scalar(s.id_local),
            tri_global: self.scalar(s.tri_global),
            tri_local: self.scalar(s.tri_local),
            contrastive: self.contrastive.map(|c| self.scalar(c.loss)),
        }
    }

    /// Gradient of the root for every trainable parameter (zeros where no
    /// path exists), `None` for frozen parameters and buffers.
    pub fn param_grads(&self, params: &ParameterStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut g = self.tape.backward(self.root);
        params
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if !p.trainable {
                    return None;
                }
                let v = self.bound.var(i);
                Some(g.take(v).unwrap_or_else(|| Tensor::zeros(p.value.rows, p.value.cols)))
            })
            .collect()
    }

    /// Folds the BNNeck batch statistics of this pass into `params`.
    pub fn update_bnneck(&self, params: &mut ParameterStore<T>, momentum: f64) -> Result<()> {
        for &(head, v) in &self.bnneck {
            let (mean, var) = self
                .tape
                .batch_stats(v)
                .ok_or_else(|| Error::Shape("bnneck node has no batch statistics".into()))?;
            update_running_stats(params, head, mean, var, self.batch, momentum)?;
        }
        Ok(())
    }
}

/// Records the dual-view forward pass and the requested objective.
pub fn build_loss<T: Real>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    batch: &ViewBatch,
    lambda: f64,
    targets: &Targets<T>,
    objective: Objective,
) -> Result<LossGraph<T>> {
    validate_lambda(lambda)?;
    let b = batch.normal.len();
    if b == 0 || batch.labels.len() != b || batch.cameras.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} images with {} labels and {} cameras",
            batch.labels.len(),
            batch.cameras.len()
        )));
    }
    if let Some(s) = &batch.strong {
        if s.len() != b {
            return Err(Error::Shape(format!("{} strong views for {b} images", s.len())));
        }
    } else if lambda < 1.0 || matches!(objective, Objective::Contrastive) {
        return Err(Error::Config("contrastive term requested without strong views".into()));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= cfg.heads.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            cfg.heads.num_classes
        )));
    }

    let enc = &cfg.encoder;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut images: Vec<&ImageBuffer> = batch.normal.iter().collect();
    let mut cameras = batch.cameras.clone();
    if let Some(s) = &batch.strong {
        images.extend(s.iter());
        cameras.extend_from_slice(&batch.cameras);
    }
    let views = images.len() / b;
    let tokens = backbone_on_tape(&mut tape, params, &bound, &images, &cameras, enc)?;
    let n1 = enc.num_patches() + 1;
    let normal_tokens = if views == 1 {
        tokens
    } else {
        tape.gather_rows(tokens, (0..b * n1).collect())
    };

    let f_g = global_on_tape(&mut tape, params, &bound, normal_tokens, b, enc)?;
    let locals = jigsaw_on_tape(&mut tape, params, &bound, normal_tokens, b, enc)?;
    let mut bnneck = Vec::with_capacity(cfg.streams());
    let (logits_g, bn) = classify_on_tape(&mut tape, params, &bound, f_g, 0, &cfg.heads)?;
    bnneck.extend(bn.map(|v| (0, v)));
    let mut streams = Vec::with_capacity(locals.len());
    for (k, &f) in locals.iter().enumerate() {
        let (logits, bn) = classify_on_tape(&mut tape, params, &bound, f, k + 1, &cfg.heads)?;
        bnneck.extend(bn.map(|v| (k + 1, v)));
        streams.push((f, logits));
    }
    let supervised = supervised_loss(&mut tape, f_g, logits_g, &streams, &batch.labels)?;

    let contrastive = if views == 2 {
        let cls = class_tokens(&mut tape, tokens, 2 * b, enc);
        let f1 = tape.gather_rows(cls, (0..b).collect());
        let f2 = tape.gather_rows(cls, (b..2 * b).collect());
        let z1 = projector_on_tape(&mut tape, params, &bound, f1, &cfg.heads)?;
        let z2 = projector_on_tape(&mut tape, params, &bound, f2, &cfg.heads)?;
        let p1 = predictor_on_tape(&mut tape, params, &bound, z1, &cfg.heads)?;
        let p2 = predictor_on_tape(&mut tape, params, &bound, z2, &cfg.heads)?;
        let loss = match targets {
            Targets::StopGradient => contrastive_loss(&mut tape, p1, z1, p2, z2)?,
            Targets::Frozen(t1, t2) => {
                if t1.shape() != tape.value(z1).shape() || t2.shape() != tape.value(z2).shape() {
                    return Err(Error::Shape("frozen targets do not match projector output".into()));
                }
                let c1 = tape.leaf(t1.clone());
                let c2 = tape.leaf(t2.clone());
                contrastive_against(&mut tape, p1, c2, p2, c1)?
            }
        };
        Some(ContrastiveVars { z1, z2, p1, p2, loss })
    } else {
        None
    };

    let total = match contrastive {
        Some(c) => joint_loss(&mut tape, supervised.total, c.loss, lambda)?,
        None => tape.weighted_sum(&[(supervised.total, T::c(lambda))]),
    };
    let root = match objective {
        Objective::GlobalTriplet => supervised.tri_global,
        Objective::Supervised => supervised.total,
        Objective::Contrastive => contrastive.expect("checked above").loss,
        Objective::Joint => total,
    };
    Ok(LossGraph {
        tape,
        bound,
        supervised,
        contrastive,
        total,
        root,
        tokens,
        bnneck,
        batch: b,
    })
}

/// True for parameters that receive weight decay.
pub fn decays(kind: ParamKind) -> bool {
    kind == ParamKind::Weight
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::random_image;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            heads: HeadConfig::toy(3),
        }
    }

    fn batch(seed: u64, strong: bool) -> ViewBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal: Vec<_> = (0..6).map(|_| random_image(32, 32, &mut rng)).collect();
        let strong = strong.then(|| (0..6).map(|_| random_image(32, 32, &mut rng)).collect());
        ViewBatch {
            normal,
            strong,
            labels: vec![0, 0, 1, 1, 2, 2],
            cameras: vec![0, 1, 2, 3, 0, 1],
        }
    }

    #[test]
    fn joint_total_combines_terms() {
        let cfg = toy_cfg();
        let p = init_model::<f64>(&cfg, 0).unwrap();
        let g = build_loss(
            &p,
            &cfg,
            &batch(1, true),
            0.95,
            &Targets::StopGradient,
            Objective::Joint,
        )
        .unwrap();
        let b = g.breakdown();
        let c = b.contrastive.unwrap();
        assert!((b.total - (0.95 * b.supervised + 0.05 * c)).abs() < 1e-12);
        assert!((b.supervised - (b.id_global + b.tri_global + b.id_local + b.tri_local)).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn lambda_zero_gives_classifiers_zero_gradient() {
        let cfg = toy_cfg();
        let p = init_model::<f64>(&cfg, 2).unwrap();
        let g = build_loss(&p, &cfg, &batch(3, true), 0.0, &Targets::StopGradient, Objective::Joint).unwrap();
        let grads = g.param_grads(&p);
        for (param, grad) in p.params().iter().zip(&grads) {
            if param.name.starts_with("classifier") || param.name.starts_with("bnneck") {
                if let Some(grad) = grad {
                    assert!(grad.data.iter().all(|&v| v == 0.0), "{}", param.name);
                }
            }
        }
    }

    #[test]
    fn missing_strong_views_rejected_below_lambda_one() {
        let cfg = toy_cfg();
        let p = init_model::<f64>(&cfg, 4).unwrap();
        let nb = batch(5, false);
        assert!(build_loss(&p, &cfg, &nb, 0.9, &Targets::StopGradient, Objective::Joint).is_err());
        let g = build_loss(&p, &cfg, &nb, 1.0, &Targets::StopGradient, Objective::Joint).unwrap();
        assert!(g.contrastive.is_none());
        assert_eq!(g.breakdown().total, g.breakdown().supervised);
    }

    #[test]
    fn bnneck_running_stats_move() {
        let cfg = toy_cfg();
        let mut p = init_model::<f64>(&cfg, 6).unwrap();
        let g = build_loss(
            &p,
            &cfg,
            &batch(7, false),
            1.0,
            &Targets::StopGradient,
            Objective::Joint,
        )
        .unwrap();
        let before = p.get("bnneck.0.running_mean").unwrap().value.clone();
        g.update_bnneck(&mut p, 0.1).unwrap();
        assert_ne!(p.get("bnneck.0.running_mean").unwrap().value, before);
    }
}
