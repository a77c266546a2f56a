//! Softmax log-likelihood and cosine triplet ranking loss.

use crate::error::{Error, Result};
use crate::real::Real;

fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

fn norm<T: Real>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

fn check_pair<T: Real>(u: &[T], v: &[T]) -> Result<(T, T)> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > T::zero()) || !(nv > T::zero()) {
        return Err(Error::Degenerate("zero-norm embedding in cosine distance".into()));
    }
    Ok((nu, nv))
}

/// `1 - u·v / (|u| |v|)`, in [0, 2].
pub fn cosine_distance<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    let (nu, nv) = check_pair(u, v)?;
    Ok(T::one() - dot(u, v) / (nu * nv))
}

/// Gradient of `cosine_distance(u, v)` with respect to `u`.
fn cosine_distance_grad<T: Real>(u: &[T], v: &[T]) -> Result<Vec<T>> {
    let (nu, nv) = check_pair(u, v)?;
    let uv = dot(u, v);
    let inv = T::one() / (nu * nv);
    let inv3 = uv / (nu * nu * nu * nv);
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| -(b * inv - a * inv3))
        .collect())
}

/// Ranking hinge `max(0, margin + d_pos - d_neg)`.
pub fn triplet_loss<T: Real>(d_pos: T, d_neg: T, margin: T) -> T {
    (margin + d_pos - d_neg).max(T::zero())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads<T> {
    pub loss: T,
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negative: Vec<T>,
}

impl<T: Real> TripletGrads<T> {
    pub fn is_satisfied(&self) -> bool {
        self.loss <= T::zero()
    }
}

/// Loss and gradients of the cosine triplet loss for one (a, p, n) triplet.
pub fn triplet_loss_backward<T: Real>(anchor: &[T], positive: &[T], negative: &[T], margin: T) -> Result<TripletGrads<T>> {
    let d_pos = cosine_distance(anchor, positive)?;
    let d_neg = cosine_distance(anchor, negative)?;
    let loss = triplet_loss(d_pos, d_neg, margin);
    let n = anchor.len();
    if loss <= T::zero() {
        return Ok(TripletGrads {
            loss,
            anchor: vec![T::zero(); n],
            positive: vec![T::zero(); n],
            negative: vec![T::zero(); n],
        });
    }
    // d(a,p) and d(a,n) are symmetric, so derivatives in the second slot
    // reuse the first-slot formula with arguments swapped
    let da_pos = cosine_distance_grad(anchor, positive)?;
    let da_neg = cosine_distance_grad(anchor, negative)?;
    let dp = cosine_distance_grad(positive, anchor)?;
    let dn = cosine_distance_grad(negative, anchor)?;
    Ok(TripletGrads {
        loss,
        anchor: da_pos.iter().zip(&da_neg).map(|(&a, &b)| a - b).collect(),
        positive: dp,
        negative: dn.into_iter().map(|g| -g).collect(),
    })
}

/// Returns `(-log softmax(logits)[label], softmax(logits) - onehot(label))`.
pub fn softmax_nll<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let log_sum = sum.ln() + max;
    let loss = log_sum - logits[label];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Index of the largest logit (first on ties).
pub fn argmax<T: Real>(values: &[T]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, T)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_distance_cases() {
        let v = [0.3f64, -1.2, 2.0];
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_distance(&v, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn triplet_loss_cases() {
        assert_eq!(triplet_loss(0.5, 0.9, 0.2), 0.0);
        assert!((triplet_loss(0.5, 0.6, 0.5) - 0.4f64).abs() < 1e-15);
        assert_eq!(triplet_loss(0.7, 0.7, 0.0), 0.0);
    }

    #[test]
    fn inactive_margin_has_zero_gradient() {
        let g = triplet_loss_backward(&[1.0, 0.1], &[1.0, 0.0], &[-1.0, 0.0], 0.2).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&x| x == 0.0));
        assert!(g.is_satisfied());
    }

    fn fd_check(a: &[f64], p: &[f64], n: &[f64], margin: f64, tol: f64) {
        let g = triplet_loss_backward(a, p, n, margin).unwrap();
        let loss = |a: &[f64], p: &[f64], n: &[f64]| {
            triplet_loss(
                cosine_distance(a, p).unwrap(),
                cosine_distance(a, n).unwrap(),
                margin,
            )
        };
        let eps = 1e-6;
        for role in 0..3 {
            for k in 0..a.len() {
                let mut v = [a.to_vec(), p.to_vec(), n.to_vec()];
                v[role][k] += eps;
                let up = loss(&v[0], &v[1], &v[2]);
                v[role][k] -= 2.0 * eps;
                let down = loss(&v[0], &v[1], &v[2]);
                let fd = (up - down) / (2.0 * eps);
                let an = [&g.anchor, &g.positive, &g.negative][role][k];
                assert!(
                    (fd - an).abs() <= tol * fd.abs().max(1e-3),
                    "role {role} k {k}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = [0.4, -0.2, 0.9, 0.1, -0.5];
        let p = [-0.3, 0.8, 0.2, -0.6, 0.4];
        let n = [0.5, -0.1, 0.7, 0.3, -0.2];
        fd_check(&a, &p, &n, 0.2, 1e-5);
    }

    #[test]
    fn near_identical_positive() {
        // positive a hair away from the anchor, away from the non-smooth point
        let a = [0.4, -0.2, 0.9];
        let p = [0.4 + 1e-3, -0.2, 0.9 - 1e-3];
        let n = [0.3, -0.1, 0.95];
        fd_check(&a, &p, &n, 0.5, 1e-4);
    }

    #[test]
    fn softmax_uniform_and_peaked() {
        let (loss, grad) = softmax_nll(&[0.0f64; 40], 3).unwrap();
        assert!((loss - 40f64.ln()).abs() < 1e-12);
        assert!((loss - 3.6889).abs() < 1e-4);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        let mut logits = vec![0.0f64; 40];
        logits[0] = 10.0;
        let (loss, _) = softmax_nll(&logits, 0).unwrap();
        assert!(loss < 0.01);
        assert!((loss - (1.0 + 39.0 * (-10f64).exp()).ln()).abs() < 1e-15);
        assert!(softmax_nll(&logits, 40).is_err());
    }

    #[test]
    fn argmax_first_on_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -1.0]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    proptest! {
        #[test]
        fn cosine_scale_invariance(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * beta).collect();
            let d = cosine_distance(&u, &v).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
            prop_assert!((d - cosine_distance(&su, &sv).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn hinge_properties(dp in 0.0f64..2.0, dn in 0.0f64..2.0, m in 0.0f64..1.0) {
            let l = triplet_loss(dp, dn, m);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l > 0.0, dn < dp + m);
        }

        #[test]
        fn softmax_gradient_properties(logits in prop::collection::vec(-20.0f64..20.0, 2..50), pick in 0usize..1000) {
            let label = pick % logits.len();
            let (loss, grad) = softmax_nll(&logits, label).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(grad.iter().all(|g| (-1.0..=1.0).contains(g)));
            prop_assert!(grad.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn triplet_gradients_fd(
            a in prop::collection::vec(-1.0f64..1.0, 5),
            p in prop::collection::vec(-1.0f64..1.0, 5),
            n in prop::collection::vec(-1.0f64..1.0, 5),
        ) {
            prop_assume!(norm(&a) > 0.2 && norm(&p) > 0.2 && norm(&n) > 0.2);
            let m = 0.5;
            let gap = m + cosine_distance(&a, &p).unwrap() - cosine_distance(&a, &n).unwrap();
            prop_assume!(gap.abs() > 1e-3);
            fd_check(&a, &p, &n, m, 1e-4);
        }
    }
}
