//! Finite-difference verification of the analytic gradients at float64.
//!
//! Per parameter tensor the analytic and numeric derivatives are compared
//! on a probe set: every coordinate for tensors of at most `full_limit`
//! elements, otherwise `coords` random coordinates plus `directions` random
//! unit directions over the whole tensor. The error is
//! `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the probe set.
//!
//! The contrastive objective is checked through its surrogate: the
//! projections `z1, z2` are evaluated once and fed back as constants, so the
//! plain derivative of the surrogate is what the stop-gradient objective
//! defines as its gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::encoder::{random_image, ParameterStore};
use crate::error::{Error, Result};
use crate::model::{build_loss, init_model, ModelConfig, Objective, Targets, ViewBatch};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub identities: usize,
    pub per_identity: usize,
    pub lambda: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub full_limit: usize,
    pub coords: usize,
    pub directions: usize,
}

impl GradcheckConfig {
    /// Toy model with three identities of two images each.
    pub fn toy() -> Self {
        let mut model = TrainConfig::toy().model;
        model.heads.num_classes = 3;
        model.encoder.n_cameras = 2;
        Self {
            model,
            seed: 0,
            identities: 3,
            per_identity: 2,
            lambda: 0.95,
            eps: 1e-6,
            tolerance: 1e-4,
            floor: 1e-3,
            full_limit: 64,
            coords: 32,
            directions: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub objective: Objective,
    pub name: String,
    pub rel_err: f64,
    pub probes: usize,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
    /// Frozen parameters, all of which received no gradient.
    pub frozen: Vec<String>,
    /// Largest |full-graph − surrogate| analytic gradient entry.
    pub surrogate_gap: f64,
    /// Largest |gradient| reaching the strong-view tokens through
    /// `D(p1, sg(z2))`.
    pub stopped_path_grad: f64,
    /// Same quantity through the unstopped `D(p1, z2)`, for contrast.
    pub open_path_grad: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_err < self.tolerance)
    }
}

fn batch(cfg: &GradcheckConfig) -> ViewBatch {
    let e = &cfg.model.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let n = cfg.identities * cfg.per_identity;
    let normal = (0..n).map(|_| random_image(e.height, e.width, &mut rng)).collect();
    let strong = (0..n).map(|_| random_image(e.height, e.width, &mut rng)).collect();
    ViewBatch {
        normal,
        strong: Some(strong),
        labels: (0..n).map(|i| i / cfg.per_identity).collect(),
        cameras: (0..n).map(|i| i % e.n_cameras.max(1)).collect(),
    }
}

enum Probe {
    Coord(usize),
    Dir(Vec<f64>),
}

fn probes(len: usize, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Vec<Probe> {
    if len <= cfg.full_limit {
        return (0..len).map(Probe::Coord).collect();
    }
    let mut out: Vec<Probe> = rand::seq::index::sample(rng, len, cfg.coords.min(len))
        .into_iter()
        .map(Probe::Coord)
        .collect();
    for _ in 0..cfg.directions {
        let mut d: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        out.push(Probe::Dir(d));
    }
    out
}

/// Runs the four objectives and the stop-gradient probes.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let params: ParameterStore<f64> = init_model(&cfg.model, cfg.seed)?;
    let views = batch(cfg);
    let model = &cfg.model;

    let full = build_loss(
        &params,
        model,
        &views,
        cfg.lambda,
        &Targets::StopGradient,
        Objective::Joint,
    )?;
    let c = full.contrastive.expect("strong views present");
    let targets = Targets::Frozen(full.tape.value(c.z1).clone(), full.tape.value(c.z2).clone());
    let full_grads = full.param_grads(&params);

    let frozen: Vec<String> = params
        .params()
        .iter()
        .zip(&full_grads)
        .filter(|(p, _)| !p.trainable)
        .map(|(p, g)| {
            if g.is_some() {
                Err(Error::Degenerate(format!("frozen {} has a gradient", p.name)))
            } else {
                Ok(p.name.clone())
            }
        })
        .collect::<Result<_>>()?;

    let (stopped_path_grad, open_path_grad) = {
        let mut g = build_loss(
            &params,
            model,
            &views,
            cfg.lambda,
            &Targets::StopGradient,
            Objective::Joint,
        )?;
        let c = g.contrastive.expect("strong views present");
        let z2s = g.tape.stop_grad(c.z2);
        let stopped = g.tape.neg_cosine(c.p1, z2s)?;
        let open = g.tape.neg_cosine(c.p1, c.z2)?;
        let b = views.normal.len();
        let start = b * (model.encoder.num_patches() + 1);
        let strong_max = |loss| {
            g.tape
                .backward(loss)
                .get(g.tokens)
                .map(|t| t.data[start * t.cols..].iter().fold(0.0f64, |m, v| m.max(v.abs())))
                .unwrap_or(0.0)
        };
        (strong_max(stopped), strong_max(open))
    };

    let mut checks = Vec::new();
    let mut surrogate_gap = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1D0);
    for objective in [
        Objective::GlobalTriplet,
        Objective::Supervised,
        Objective::Contrastive,
        Objective::Joint,
    ] {
        let eval = |p: &ParameterStore<f64>| -> Result<f64> {
            let g = build_loss(p, model, &views, cfg.lambda, &targets, objective)?;
            Ok(g.scalar(g.root))
        };
        let grads = build_loss(&params, model, &views, cfg.lambda, &targets, objective)?.param_grads(&params);
        if objective == Objective::Joint {
            for (a, b) in grads.iter().zip(&full_grads) {
                if let (Some(a), Some(b)) = (a, b) {
                    for (x, y) in a.data.iter().zip(&b.data) {
                        surrogate_gap = surrogate_gap.max((x - y).abs());
                    }
                }
            }
        }
        let mut work = params.clone();
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let len = g.len();
            let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
            let ps = probes(len, cfg, &mut rng);
            for probe in &ps {
                let (a, n) = match probe {
                    Probe::Coord(i) => {
                        let x0 = work.params()[id].value.data[*i];
                        work.params_mut()[id].value.data[*i] = x0 + cfg.eps;
                        let fp = eval(&work)?;
                        work.params_mut()[id].value.data[*i] = x0 - cfg.eps;
                        let fm = eval(&work)?;
                        work.params_mut()[id].value.data[*i] = x0;
                        (g.data[*i], (fp - fm) / (2.0 * cfg.eps))
                    }
                    Probe::Dir(d) => {
                        let x0 = work.params()[id].value.clone();
                        let shifted = |s: f64| {
                            let mut t = x0.clone();
                            t.data.iter_mut().zip(d).for_each(|(x, dv)| *x += s * dv);
                            t
                        };
                        work.params_mut()[id].value = shifted(cfg.eps);
                        let fp = eval(&work)?;
                        work.params_mut()[id].value = shifted(-cfg.eps);
                        let fm = eval(&work)?;
                        work.params_mut()[id].value = x0;
                        let a: f64 = g.data.iter().zip(d).map(|(x, y)| x * y).sum();
                        (a, (fp - fm) / (2.0 * cfg.eps))
                    }
                };
                diff += (a - n) * (a - n);
                na += a * a;
                nn += n * n;
            }
            let denom = na.sqrt().max(nn.sqrt()).max(cfg.floor);
            checks.push(TensorCheck {
                objective,
                name: params.params()[id].name.clone(),
                rel_err: diff.sqrt() / denom,
                probes: ps.len(),
                analytic_norm: g.norm_sq().sqrt(),
            });
        }
    }
    Ok(GradcheckReport {
        checks,
        frozen,
        surrogate_gap,
        stopped_path_grad,
        open_path_grad,
        tolerance: cfg.tolerance,
    })
}

/// Largest absolute entry, a convenience for reports.
pub fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data.iter().fold(0.0, |m, v| m.max(v.abs()))
}
