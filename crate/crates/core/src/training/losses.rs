use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Posterior floor inside the logarithm of the cross-entropy.
pub const LOG_EPS: f64 = 1e-7;

/// Per-class loss weights, positive with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weight: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n: usize) -> Self {
        ClassWeights { weight: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }
}

/// Inverse-frequency weights rescaled to mean 1.
pub fn compute_class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Empty("no classes".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroCount(c));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(ClassWeights { weight: inv.iter().map(|w| w / mean).collect() })
}

/// Target distribution with uniform mass over a bag of labels.
pub fn target_from_bag(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("label bag".into()));
    }
    let mut t = vec![0.0; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("label {l} >= {n_classes}")));
        }
        t[l] += 1.0;
    }
    let n = labels.len() as f64;
    t.iter_mut().for_each(|v| *v /= n);
    Ok(t)
}

/// Weighted categorical cross-entropy (natural log) of an utterance-level
/// posterior against a target distribution.
pub fn vp_loss(posterior: &[f64], target: &[f64], weights: &ClassWeights) -> Result<f64> {
    if posterior.len() != target.len() || target.len() != weights.len() {
        return Err(Error::Shape(format!(
            "posterior {}, target {}, weights {}",
            posterior.len(),
            target.len(),
            weights.len()
        )));
    }
    Ok(vp_loss_generic(posterior, target, &weights.weight))
}

pub(crate) fn vp_loss_generic<T: Real>(p: &[T], target: &[T], w: &[T]) -> T {
    let eps = T::of(LOG_EPS);
    p.iter()
        .zip(target)
        .zip(w)
        .filter(|((_, &t), _)| t != T::zero())
        .map(|((&p, &t), &w)| -w * t * p.max(eps).ln())
        .sum()
}

pub(crate) fn vp_loss_grad<T: Real>(p: &[T], target: &[T], w: &[T]) -> Array1<T> {
    let eps = T::of(LOG_EPS);
    Array1::from_iter(p.iter().zip(target).zip(w).map(|((&p, &t), &w)| {
        if t == T::zero() || p <= eps {
            T::zero()
        } else {
            -w * t / p
        }
    }))
}

/// Divides a max-pooled utterance posterior by its sum. Frame-wise maxima do
/// not sum to one, and cross-entropy on the raw maxima is minimized by
/// letting every class peak somewhere in every utterance.
pub fn normalize_posterior(posterior: &[f64]) -> Vec<f64> {
    let s: f64 = posterior.iter().sum();
    posterior.iter().map(|&p| p / s).collect()
}

/// Cross-entropy of the sum-normalized posterior; this is the training
/// objective's visual-prediction term.
pub(crate) fn vp_loss_normalized<T: Real>(p: &[T], target: &[T], w: &[T]) -> T {
    let s = p.iter().fold(T::zero(), |a, &v| a + v);
    let q: Vec<T> = p.iter().map(|&v| v / s).collect();
    vp_loss_generic(&q, target, w)
}

pub(crate) fn vp_loss_normalized_grad<T: Real>(p: &[T], target: &[T], w: &[T]) -> Array1<T> {
    let s = p.iter().fold(T::zero(), |a, &v| a + v);
    let q: Vec<T> = p.iter().map(|&v| v / s).collect();
    let gq = vp_loss_grad(&q, target, w);
    // dq_j/dp_c = (delta_jc - q_j) / s
    let dot = gq.iter().zip(&q).fold(T::zero(), |a, (&g, &q)| a + g * q);
    gq.mapv(|g| (g - dot) / s)
}

/// Root mean squared error over the rows whose mask entry is true.
pub fn ae_loss(reconstruction: ArrayView2<f64>, target: ArrayView2<f64>, mask: &[bool]) -> Result<f64> {
    if reconstruction.dim() != target.dim() || mask.len() != target.nrows() {
        return Err(Error::Shape(format!(
            "reconstruction {:?}, target {:?}, mask {}",
            reconstruction.dim(),
            target.dim(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("mask selects no frames".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, &m) in mask.iter().enumerate() {
        if m {
            for (r, y) in reconstruction.row(t).iter().zip(target.row(t)) {
                sum += (r - y) * (r - y);
                n += 1;
            }
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// RMSE over the first `valid` rows, plus its gradient w.r.t. the reconstruction.
pub(crate) fn ae_loss_prefix<T: Real>(recon: &Array2<T>, target: &Array2<T>, valid: usize) -> (T, Array2<T>) {
    let mut grad = Array2::zeros(recon.raw_dim());
    if valid == 0 {
        return (T::zero(), grad);
    }
    let n = T::of((valid * recon.ncols()) as f64);
    let mut sum = T::zero();
    for t in 0..valid {
        for f in 0..recon.ncols() {
            let d = recon[[t, f]] - target[[t, f]];
            sum += d * d;
            grad[[t, f]] = d;
        }
    }
    let rmse = (sum / n).sqrt();
    if rmse > T::zero() {
        grad.mapv_inplace(|d| d / (n * rmse));
    } else {
        grad.fill(T::zero());
    }
    (rmse, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn class_weights() {
        assert_eq!(compute_class_weights(&[50, 50]).unwrap().weight, vec![1.0, 1.0]);
        let w = compute_class_weights(&[50, 100]).unwrap().weight;
        assert_abs_diff_eq!(w[0], 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 2.0 / 3.0, epsilon = 1e-12);
        assert!(matches!(compute_class_weights(&[3, 0, 2]), Err(Error::ZeroCount(1))));
        let w = compute_class_weights(&[1, 7, 13, 400]).unwrap().weight;
        assert_abs_diff_eq!(w.iter().sum::<f64>() / 4.0, 1.0, epsilon = 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn vp_loss_values() {
        let u = ClassWeights::uniform(3);
        assert!(vp_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], &u).unwrap() < 1e-12);
        let l = vp_loss(&[0.2, 0.5, 0.9], &[0.0, 1.0, 0.0], &u).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        let w2 = ClassWeights { weight: vec![1.0, 2.0, 1.0] };
        assert_abs_diff_eq!(vp_loss(&[0.2, 0.5, 0.9], &[0.0, 1.0, 0.0], &w2).unwrap(), 2.0 * l, epsilon = 1e-12);
        assert!(vp_loss(&[0.5, 0.5], &[1.0, 0.0, 0.0], &u).is_err());
        // clamped at eps instead of infinite
        let l = vp_loss(&[0.0, 0.5, 0.5], &[1.0, 0.0, 0.0], &u).unwrap();
        assert_abs_diff_eq!(l, -(LOG_EPS.ln()), epsilon = 1e-9);
    }

    #[test]
    fn bag_targets() {
        assert_eq!(target_from_bag(&[0, 2], 4).unwrap(), vec![0.5, 0.0, 0.5, 0.0]);
        assert!(target_from_bag(&[], 4).is_err());
    }

    #[test]
    fn ae_loss_values() {
        let y = Array2::<f64>::zeros((4, 3));
        let r = Array2::<f64>::ones((4, 3));
        assert_eq!(ae_loss(y.view(), y.view(), &[true; 4]).unwrap(), 0.0);
        assert_abs_diff_eq!(ae_loss(r.view(), y.view(), &[true; 4]).unwrap(), 1.0, epsilon = 1e-15);
        let mut r2 = y.clone();
        r2.row_mut(3).fill(5.0);
        assert_eq!(ae_loss(r2.view(), y.view(), &[true, true, true, false]).unwrap(), 0.0);
        assert!(matches!(ae_loss(r.view(), y.view(), &[false; 4]), Err(Error::Empty(_))));
        assert!(ae_loss(r.view(), y.view(), &[true; 3]).is_err());
        let (l, _) = ae_loss_prefix(&r, &y, 4);
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn normalized_vp_gradient_matches_differences() {
        let p: [f64; 4] = [0.9, 0.4, 0.05, 0.7];
        let t = [0.0, 1.0, 0.0, 0.0];
        let w = [1.2, 0.8, 1.0, 1.0];
        let g = vp_loss_normalized_grad(&p, &t, &w);
        for c in 0..4 {
            let mut a = p;
            let mut b = p;
            a[c] += 1e-6;
            b[c] -= 1e-6;
            let num = (vp_loss_normalized(&a, &t, &w) - vp_loss_normalized(&b, &t, &w)) / 2e-6;
            assert!((g[c] - num).abs() < 1e-7, "{c}: {} vs {num}", g[c]);
        }
        // scale invariance: the raw maxima only matter relative to each other
        let scaled: Vec<f64> = p.iter().map(|v| v * 0.5).collect();
        assert!((vp_loss_normalized(&p, &t, &w) - vp_loss_normalized(&scaled, &t, &w)).abs() < 1e-12);
        let q = normalize_posterior(&p);
        assert!((vp_loss_normalized(&p, &t, &w) - vp_loss_generic(&q, &t, &w)).abs() < 1e-15);
    }
}
