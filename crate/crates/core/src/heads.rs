//! Supervised heads (BNNeck + bias-free classifier, one per feature stream)
//! and the projector/predictor pair of the contrastive branch.
//!
//! Head 0 is the global stream, heads `1..=K` the jigsaw streams.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, BATCH_NORM_EPS};
use crate::encoder::{ones, trunc_normal, Bound, ParamKind, ParameterStore, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    /// Weight of the current batch in the BNNeck running statistics.
    pub bnneck_momentum: f64,
    /// Skip every normalization layer. Only useful for tests.
    pub bypass_norm: bool,
}

impl HeadConfig {
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_classes,
            proj_hidden: 64,
            proj_out: 32,
            pred_hidden: 64,
            bnneck_momentum: 0.1,
            bypass_norm: false,
        }
    }

    pub fn full(num_classes: usize) -> Self {
        Self {
            num_classes,
            proj_hidden: 4096,
            proj_out: 256,
            pred_hidden: 4096,
            bnneck_momentum: 0.1,
            bypass_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.proj_hidden == 0 || self.proj_out == 0 || self.pred_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bnneck_momentum) {
            return Err(Error::Config(format!(
                "bnneck momentum {} outside [0, 1]",
                self.bnneck_momentum
            )));
        }
        Ok(())
    }
}

pub(crate) fn add_head_parameters<T: Real>(
    s: &mut ParameterStore<T>,
    dim: usize,
    streams: usize,
    cfg: &HeadConfig,
    rng: &mut ChaCha8Rng,
) {
    for h in 0..streams {
        s.insert(format!("bnneck.{h}.weight"), ParamKind::Norm, true, ones(dim));
        s.insert(format!("bnneck.{h}.bias"), ParamKind::Norm, true, Tensor::zeros(1, dim));
        s.insert(
            format!("bnneck.{h}.running_mean"),
            ParamKind::Buffer,
            false,
            Tensor::zeros(1, dim),
        );
        s.insert(format!("bnneck.{h}.running_var"), ParamKind::Buffer, false, ones(dim));
        s.insert(
            format!("classifier.{h}.weight"),
            ParamKind::Weight,
            true,
            trunc_normal(rng, cfg.num_classes, dim, INIT_STD),
        );
    }
    let widths = [dim, cfg.proj_hidden, cfg.proj_hidden, cfg.proj_out];
    for i in 0..3 {
        s.insert(
            format!("projector.fc{i}.weight"),
            ParamKind::Weight,
            true,
            trunc_normal(rng, widths[i + 1], widths[i], INIT_STD),
        );
        if i < 2 {
            s.insert(
                format!("projector.bn{i}.weight"),
                ParamKind::Norm,
                true,
                ones(widths[i + 1]),
            );
            s.insert(
                format!("projector.bn{i}.bias"),
                ParamKind::Norm,
                true,
                Tensor::zeros(1, widths[i + 1]),
            );
        }
    }
    s.insert(
        "predictor.fc0.weight",
        ParamKind::Weight,
        true,
        trunc_normal(rng, cfg.pred_hidden, cfg.proj_out, INIT_STD),
    );
    s.insert("predictor.bn0.weight", ParamKind::Norm, true, ones(cfg.pred_hidden));
    s.insert(
        "predictor.bn0.bias",
        ParamKind::Norm,
        true,
        Tensor::zeros(1, cfg.pred_hidden),
    );
    s.insert(
        "predictor.fc1.weight",
        ParamKind::Weight,
        true,
        trunc_normal(rng, cfg.proj_out, cfg.pred_hidden, INIT_STD),
    );
    s.insert(
        "predictor.fc1.bias",
        ParamKind::Bias,
        true,
        Tensor::zeros(1, cfg.proj_out),
    );
}

fn check_width<T: Real>(tape: &Tape<T>, v: Var, want: usize, what: &str) -> Result<()> {
    let got = tape.value(v).cols;
    if got != want {
        return Err(Error::Shape(format!("{what}: input width {got}, expected {want}")));
    }
    Ok(())
}

fn affine_bn<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    x: Var,
    prefix: &str,
    cfg: &HeadConfig,
) -> Result<Var> {
    if cfg.bypass_norm {
        return Ok(x);
    }
    let g = b.var(s.require(&format!("{prefix}.weight"))?);
    let beta = b.var(s.require(&format!("{prefix}.bias"))?);
    Ok(tape.batch_norm(x, Some((g, beta))))
}

/// Three bias-free linear layers; batch norm + ReLU after the first two,
/// non-affine batch norm after the last. `f` is `B × D`.
pub fn projector_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    f: Var,
    cfg: &HeadConfig,
) -> Result<Var> {
    let w0 = s.require("projector.fc0.weight")?;
    check_width(tape, f, s.value(w0).cols, "projector")?;
    let mut x = f;
    for i in 0..3 {
        x = tape.linear(x, b.var(s.require(&format!("projector.fc{i}.weight"))?), None);
        if i < 2 {
            x = affine_bn(tape, s, b, x, &format!("projector.bn{i}"), cfg)?;
            x = tape.relu(x);
        } else if !cfg.bypass_norm {
            x = tape.batch_norm(x, None);
        }
    }
    Ok(x)
}

/// Linear → batch norm → ReLU → linear with bias.
pub fn predictor_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    z: Var,
    cfg: &HeadConfig,
) -> Result<Var> {
    let w0 = s.require("predictor.fc0.weight")?;
    check_width(tape, z, s.value(w0).cols, "predictor")?;
    let x = tape.linear(z, b.var(w0), None);
    let x = affine_bn(tape, s, b, x, "predictor.bn0", cfg)?;
    let x = tape.relu(x);
    Ok(tape.linear(
        x,
        b.var(s.require("predictor.fc1.weight")?),
        Some(b.var(s.require("predictor.fc1.bias")?)),
    ))
}

/// Training-mode BNNeck and classifier for stream `head`. Returns the
/// logits and the BNNeck node (for running-statistics updates).
pub fn classify_on_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &ParameterStore<T>,
    b: &Bound,
    f: Var,
    head: usize,
    cfg: &HeadConfig,
) -> Result<(Var, Option<Var>)> {
    let w = s.require(&format!("classifier.{head}.weight"))?;
    check_width(tape, f, s.value(w).cols, "classifier")?;
    let (x, bn) = if cfg.bypass_norm {
        (f, None)
    } else {
        let x = affine_bn(tape, s, b, f, &format!("bnneck.{head}"), cfg)?;
        (x, Some(x))
    };
    Ok((tape.linear(x, b.var(w), None), bn))
}

/// Folds batch statistics into the running statistics of BNNeck `head`.
/// The stored variance is the unbiased batch estimate.
pub fn update_running_stats<T: Real>(
    s: &mut ParameterStore<T>,
    head: usize,
    mean: &[T],
    var: &[T],
    batch: usize,
    momentum: f64,
) -> Result<()> {
    let m = T::c(momentum);
    let keep = T::one() - m;
    let unbias = if batch > 1 {
        T::c(batch as f64 / (batch - 1) as f64)
    } else {
        T::one()
    };
    let rm = s.require(&format!("bnneck.{head}.running_mean"))?;
    let rv = s.require(&format!("bnneck.{head}.running_var"))?;
    for (r, &v) in s.params_mut()[rm].value.data.iter_mut().zip(mean) {
        *r = keep * *r + m * v;
    }
    for (r, &v) in s.params_mut()[rv].value.data.iter_mut().zip(var) {
        *r = keep * *r + m * v * unbias;
    }
    Ok(())
}

/// Eval-mode classification with running statistics. `f` is `B × D`.
pub fn classify_eval<T: Real>(
    f: &Tensor<T>,
    s: &ParameterStore<T>,
    head: usize,
    cfg: &HeadConfig,
) -> Result<Tensor<T>> {
    let w = s.value(s.require(&format!("classifier.{head}.weight"))?);
    if f.cols != w.cols {
        return Err(Error::Shape(format!(
            "classifier: input width {}, expected {}",
            f.cols, w.cols
        )));
    }
    let mut x = f.clone();
    if !cfg.bypass_norm {
        let get = |n: &str| s.require(&format!("bnneck.{head}.{n}")).map(|i| &s.value(i).data);
        let (g, beta, rm, rv) = (get("weight")?, get("bias")?, get("running_mean")?, get("running_var")?);
        let eps = T::c(BATCH_NORM_EPS);
        for r in 0..x.rows {
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - rm[c]) / (rv[c] + eps).sqrt() * g[c] + beta[c];
            }
        }
    }
    Ok(crate::tensor::matmul(&x, false, w, true))
}

/// Projector then predictor on a batch `f` (`B × D`), training-mode
/// normalization. Returns `(z, p)`.
pub fn project_and_predict<T: Real>(
    f: &Tensor<T>,
    s: &ParameterStore<T>,
    cfg: &HeadConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let b = s.bind(&mut tape);
    let x = tape.leaf(f.clone());
    let z = projector_on_tape(&mut tape, s, &b, x, cfg)?;
    let p = predictor_on_tape(&mut tape, s, &b, z, cfg)?;
    Ok((tape.value(z).clone(), tape.value(p).clone()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn store(dim: usize, cfg: &HeadConfig, streams: usize) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        add_head_parameters(&mut s, dim, streams, cfg, &mut ChaCha8Rng::seed_from_u64(0));
        s
    }

    fn identity(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn identity_heads_pass_through() {
        let cfg = HeadConfig {
            num_classes: 4,
            proj_hidden: 4,
            proj_out: 4,
            pred_hidden: 4,
            bnneck_momentum: 0.1,
            bypass_norm: true,
        };
        let mut s = store(4, &cfg, 1);
        for name in [
            "projector.fc0.weight",
            "projector.fc1.weight",
            "projector.fc2.weight",
            "predictor.fc0.weight",
            "predictor.fc1.weight",
            "classifier.0.weight",
        ] {
            s.get_mut(name).unwrap().value = identity(4);
        }
        let f = Tensor::from_vec(2, 4, vec![0.5, 1.0, 2.0, 0.25, 3.0, 0.1, 0.2, 0.3]);
        let (z, p) = project_and_predict(&f, &s, &cfg).unwrap();
        assert_eq!(z, f);
        assert_eq!(p, f);
        assert_eq!(classify_eval(&f, &s, 0, &cfg).unwrap(), f);
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let cfg = HeadConfig::toy(3);
        let s = store(8, &cfg, 1);
        let (z, _) = project_and_predict(&Tensor::zeros(4, 8), &s, &cfg).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(project_and_predict(&Tensor::zeros(4, 7), &s, &cfg).is_err());
    }

    #[test]
    fn classify_matches_manual_product() {
        let cfg = HeadConfig {
            bypass_norm: true,
            ..HeadConfig::toy(3)
        };
        let mut s = store(2, &cfg, 1);
        s.get_mut("classifier.0.weight").unwrap().value = Tensor::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let f = Tensor::from_vec(1, 2, vec![2.0, -1.0]);
        let out = classify_eval(&f, &s, 0, &cfg).unwrap();
        assert_eq!(out.data, vec![0.0, -2.5, -3.0]);
        let zero = classify_eval(&Tensor::zeros(1, 2), &s, 0, &cfg).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_classify_uses_running_stats() {
        let cfg = HeadConfig::toy(2);
        let mut s = store(2, &cfg, 1);
        s.get_mut("classifier.0.weight").unwrap().value = identity(2);
        update_running_stats(&mut s, 0, &[1.0, 2.0], &[4.0, 9.0], 2, 1.0).unwrap();
        assert_eq!(s.get("bnneck.0.running_var").unwrap().value.data, vec![8.0, 18.0]);
        let f = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let before = s.clone();
        let out = classify_eval(&f, &s, 0, &cfg).unwrap();
        assert!(out.data.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(s, before);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let cfg = HeadConfig::toy(2);
        let mut s = store(1, &cfg, 1);
        update_running_stats(&mut s, 0, &[2.0], &[1.0], 1, 0.1).unwrap();
        assert!((s.get("bnneck.0.running_mean").unwrap().value.data[0] - 0.2).abs() < 1e-15);
        assert!((s.get("bnneck.0.running_var").unwrap().value.data[0] - 1.0).abs() < 1e-15);
    }
}
