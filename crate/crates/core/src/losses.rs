//! Training objectives built on the tape.
//!
//! Every batched loss is a mean: cross-entropy over samples, triplet over
//! mined anchors, negative cosine over rows.

use crate::autodiff::{Tape, TripletIdx, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean cross-entropy without label smoothing.
pub fn id_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean soft-margin triplet loss over explicit row triplets of `features`.
pub fn triplet_loss<T: Real>(tape: &mut Tape<T>, features: Var, triplets: Vec<TripletIdx>) -> Result<Var> {
    tape.soft_margin_triplet(features, triplets)
}

/// Batch-hard mining on Euclidean distance: per anchor, the farthest
/// same-label row and the nearest other-label row, lowest index on ties.
/// Anchors lacking a positive or a negative are skipped.
pub fn mine_triplets<T: Real>(features: &Tensor<T>, labels: &[usize]) -> Result<Vec<TripletIdx>> {
    let n = features.rows;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} feature rows", labels.len())));
    }
    let mut dist = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: T = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        if let (Some(positive), Some(negative)) = (pos, neg) {
            out.push(TripletIdx {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate(
            "no anchor has both a positive and a negative in the batch".into(),
        ));
    }
    Ok(out)
}

/// Components of the supervised objective.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedTerms {
    pub total: Var,
    pub id_global: Var,
    pub tri_global: Var,
    /// Means over the K local streams.
    pub id_local: Var,
    pub tri_local: Var,
}

/// `ID(g) + T(g) + (1/K)·Σ_k [ID(l_k) + T(l_k)]`, mining triplets
/// separately in each stream.
pub fn supervised_loss<T: Real>(
    tape: &mut Tape<T>,
    f_g: Var,
    logits_g: Var,
    locals: &[(Var, Var)],
    labels: &[usize],
) -> Result<SupervisedTerms> {
    if locals.is_empty() {
        return Err(Error::InvalidArgument(
            "supervised loss needs at least one local stream".into(),
        ));
    }
    let id_global = id_loss(tape, logits_g, labels)?;
    let trips = mine_triplets(tape.value(f_g), labels)?;
    let tri_global = triplet_loss(tape, f_g, trips)?;
    let w = T::one() / T::c(locals.len() as f64);
    let mut ids = Vec::with_capacity(locals.len());
    let mut tris = Vec::with_capacity(locals.len());
    for &(f, logits) in locals {
        ids.push((id_loss(tape, logits, labels)?, w));
        let trips = mine_triplets(tape.value(f), labels)?;
        tris.push((triplet_loss(tape, f, trips)?, w));
    }
    let id_local = tape.weighted_sum(&ids);
    let tri_local = tape.weighted_sum(&tris);
    let one = T::one();
    let total = tape.weighted_sum(&[(id_global, one), (tri_global, one), (id_local, one), (tri_local, one)]);
    Ok(SupervisedTerms {
        total,
        id_global,
        tri_global,
        id_local,
        tri_local,
    })
}

/// Row-mean negative cosine similarity.
pub fn negative_cosine<T: Real>(tape: &mut Tape<T>, p: Var, z: Var) -> Result<Var> {
    tape.neg_cosine(p, z)
}

/// Symmetric negative cosine between predictions and stopped projections.
pub fn contrastive_loss<T: Real>(tape: &mut Tape<T>, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    let t2 = tape.stop_grad(z2);
    let t1 = tape.stop_grad(z1);
    contrastive_against(tape, p1, t2, p2, t1)
}

/// The contrastive objective with caller-supplied targets, which are used
/// as given (no stop-gradient node is inserted).
pub fn contrastive_against<T: Real>(tape: &mut Tape<T>, p1: Var, target2: Var, p2: Var, target1: Var) -> Result<Var> {
    let a = negative_cosine(tape, p1, target2)?;
    let b = negative_cosine(tape, p2, target1)?;
    let half = T::c(0.5);
    Ok(tape.weighted_sum(&[(a, half), (b, half)]))
}

pub fn validate_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda {lambda} outside [0, 1]")))
    }
}

/// `λ·supervised + (1−λ)·contrastive` on the tape.
pub fn joint_loss<T: Real>(tape: &mut Tape<T>, supervised: Var, contrastive: Var, lambda: f64) -> Result<Var> {
    validate_lambda(lambda)?;
    Ok(tape.weighted_sum(&[(supervised, T::c(lambda)), (contrastive, T::c(1.0 - lambda))]))
}

/// Scalar form of [`joint_loss`].
pub fn joint_value(lambda: f64, supervised: f64, contrastive: f64) -> f64 {
    lambda * supervised + (1.0 - lambda) * contrastive
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, rows: usize, cols: usize, v: &[f64]) -> Var {
        tape.leaf(Tensor::from_vec(rows, cols, v.to_vec()))
    }

    fn eval_id(logits: &[f64], label: usize) -> Result<f64> {
        let mut t = Tape::new();
        let l = leaf(&mut t, 1, logits.len(), logits);
        let v = id_loss(&mut t, l, &[label])?;
        Ok(t.value(v).item())
    }

    fn eval_triplet(a: &[f64], p: &[f64], n: &[f64]) -> f64 {
        let mut t = Tape::new();
        let rows: Vec<f64> = [a, p, n].concat();
        let x = leaf(&mut t, 3, a.len(), &rows);
        let v = triplet_loss(
            &mut t,
            x,
            vec![TripletIdx {
                anchor: 0,
                positive: 1,
                negative: 2,
            }],
        )
        .unwrap();
        t.value(v).item()
    }

    fn cosine(p: &[f64], z: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let a = leaf(&mut t, 1, p.len(), p);
        let b = leaf(&mut t, 1, z.len(), z);
        let v = negative_cosine(&mut t, a, b)?;
        Ok(t.value(v).item())
    }

    #[test]
    fn id_loss_points() {
        assert!((eval_id(&[0.3, 0.3], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((eval_id(&[1.5; 10], 7).unwrap() - 10f64.ln()).abs() < 1e-12);
        let big = eval_id(&[1000.0, 0.0], 0).unwrap();
        assert!(big.is_finite() && big.abs() < 1e-12);
        assert!(eval_id(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn triplet_points() {
        assert!((eval_triplet(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        // log(1 + e^-2), evaluated independently.
        let want = 0.126_928_011_042_972_6;
        assert!((eval_triplet(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]) - want).abs() < 1e-12);
        let far = eval_triplet(&[0.0], &[0.0], &[5.0]);
        assert!(far > 0.0 && far < 1e-10);
    }

    #[test]
    fn batch_hard_mining() {
        // Two ids, orthogonal unit features per id, plus a slight offset so
        // distances are distinct.
        let f = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.2, 0.8]);
        let t = mine_triplets(&f, &[0, 0, 1, 1]).unwrap();
        let pairs: Vec<(usize, usize, usize)> = t.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
        assert_eq!(pairs, vec![(0, 1, 3), (1, 0, 3), (2, 3, 1), (3, 2, 1)]);
    }

    #[test]
    fn mining_ties_use_lowest_index_and_identical_features_give_ln2() {
        let f = Tensor::from_vec(4, 2, vec![0.5; 8]);
        let t = mine_triplets(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!((t[0].positive, t[0].negative), (1, 2));
        assert_eq!((t[3].positive, t[3].negative), (2, 0));
        let mut tape = Tape::new();
        let x = tape.leaf(f);
        let v = triplet_loss(&mut tape, x, t).unwrap();
        assert!((tape.value(v).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mining_skips_singletons_and_fails_when_nothing_left() {
        let f = Tensor::from_vec(3, 1, vec![0.0, 1.0, 2.0]);
        let t = mine_triplets(&f, &[0, 0, 1]).unwrap();
        assert_eq!(t.len(), 2);
        assert!(mine_triplets(&f, &[0, 1, 2]).is_err());
        assert!(mine_triplets(&f, &[0, 0, 0]).is_err());
    }

    #[test]
    fn negative_cosine_points() {
        assert!((cosine(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let a = cosine(&[1.0, 2.0, -0.5], &[0.3, 0.1, 0.9]).unwrap();
        let b = cosine(&[3.0, 6.0, -1.5], &[0.03, 0.01, 0.09]).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn contrastive_points() {
        let mut t = Tape::new();
        let x = [0.4, -1.2, 2.0];
        let v: Vec<Var> = (0..4).map(|_| leaf(&mut t, 1, 3, &x)).collect();
        let l = contrastive_loss(&mut t, v[0], v[1], v[2], v[3]).unwrap();
        assert!((t.value(l).item() + 1.0).abs() < 1e-15);

        let mut t = Tape::new();
        let p1 = leaf(&mut t, 1, 2, &[1.0, 0.2]);
        let z1 = leaf(&mut t, 1, 2, &[0.1, 1.0]);
        let p2 = leaf(&mut t, 1, 2, &[-0.5, 0.3]);
        let z2 = leaf(&mut t, 1, 2, &[0.7, 0.7]);
        let a = contrastive_loss(&mut t, p1, z1, p2, z2).unwrap();
        let b = contrastive_loss(&mut t, p2, z2, p1, z1).unwrap();
        assert_eq!(t.value(a).item(), t.value(b).item());
    }

    #[test]
    fn joint_points() {
        assert_eq!(joint_value(1.0, 2.0, -0.5), 2.0);
        assert_eq!(joint_value(0.0, 2.0, -0.5), -0.5);
        assert!((joint_value(0.95, 2.0, -0.5) - 1.875).abs() < 1e-12);
        let mut t = Tape::new();
        let s = leaf(&mut t, 1, 1, &[2.0]);
        let c = leaf(&mut t, 1, 1, &[-0.5]);
        let j = joint_loss(&mut t, s, c, 0.95).unwrap();
        assert!((t.value(j).item() - 1.875).abs() < 1e-12);
        assert!(joint_loss(&mut t, s, c, 1.5).is_err());
        let mid = joint_value(0.5, 2.0, -0.5);
        assert!((mid - 0.5 * (joint_value(0.0, 2.0, -0.5) + joint_value(1.0, 2.0, -0.5))).abs() < 1e-12);
    }

    #[test]
    fn supervised_collapses_with_one_duplicated_stream() {
        let mut t = Tape::new();
        let f = leaf(&mut t, 4, 2, &[1.0, 0.0, 0.8, 0.3, -0.2, 1.0, 0.1, 0.7]);
        let logits = leaf(
            &mut t,
            4,
            3,
            &[0.1, 0.5, -0.2, 1.0, 0.0, 0.3, -0.4, 0.9, 0.2, 0.0, 0.0, 0.6],
        );
        let labels = [0, 0, 1, 1];
        let s = supervised_loss(&mut t, f, logits, &[(f, logits)], &labels).unwrap();
        let id = t.value(s.id_global).item();
        let tri = t.value(s.tri_global).item();
        assert!((t.value(s.total).item() - 2.0 * (id + tri)).abs() < 1e-12);
        let two = supervised_loss(&mut t, f, logits, &[(f, logits), (f, logits)], &labels).unwrap();
        assert!((t.value(two.total).item() - t.value(s.total).item()).abs() < 1e-12);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn triplet_positive_and_decreasing(a in prop::collection::vec(-3.0f64..3.0, 3),
                                               p in prop::collection::vec(-3.0f64..3.0, 3),
                                               dir in prop::collection::vec(-1.0f64..1.0, 3),
                                               step in 0.1f64..2.0) {
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assume!(norm > 1e-3);
                let n1: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + d / norm).collect();
                let n2: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + (1.0 + step) * d / norm).collect();
                let l1 = eval_triplet(&a, &p, &n1);
                let l2 = eval_triplet(&a, &p, &n2);
                prop_assert!(l1 > 0.0 && l2 > 0.0);
                prop_assert!(l2 < l1);
            }

            #[test]
            fn id_loss_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 2..8), pick in 0usize..8) {
                let label = pick % logits.len();
                prop_assert!(eval_id(&logits, label).unwrap() >= 0.0);
            }

            #[test]
            fn contrastive_bounded_and_scale_invariant(v in prop::collection::vec(-2.0f64..2.0, 16),
                                                      s in 0.01f64..100.0) {
                let rows: Vec<&[f64]> = v.chunks(4).collect();
                prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
                let eval = |scale: f64| {
                    let mut t = Tape::new();
                    let mut vars: Vec<Var> = rows.iter().map(|r| leaf(&mut t, 1, 4, r)).collect();
                    let scaled: Vec<f64> = rows[0].iter().map(|x| x * scale).collect();
                    vars[0] = leaf(&mut t, 1, 4, &scaled);
                    let l = contrastive_loss(&mut t, vars[0], vars[1], vars[2], vars[3]).unwrap();
                    t.value(l).item()
                };
                let a = eval(1.0);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                prop_assert!((a - eval(s)).abs() < 1e-12);
            }
        }
    }
}
