//! Central finite-difference check of the analytic training gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{batch_gradient, batch_loss};
use super::{Example, Objective};
use crate::model::Model;
use crate::parallel::Parallelism;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub n_samples: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error, `tensor[index]: analytic .. numeric ..`.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `batch_loss` (data loss plus L2) with
/// central differences at `n_samples` random coordinates. Every tensor is
/// sampled at least once when `n_samples` allows.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &mut Model<f64>,
    batch: &[&Example<f64>],
    weights: &[f64],
    objective: Objective,
    dropout_seeds: Option<&[u64]>,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let mode = Parallelism::Sequential;
    let (_, _, grad) = batch_gradient(model, batch, weights, objective, dropout_seeds, mode);
    let analytic: Vec<(String, Vec<f64>)> = grad.tensors().iter().map(|t| (t.name.clone(), t.data.to_vec())).collect();
    let sizes: Vec<usize> = analytic.iter().map(|(_, d)| d.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { n_samples, max_rel_err: 0.0, worst: String::new() };
    for k in 0..n_samples {
        let (ti, i) = if k < sizes.len() {
            (k, rng.random_range(0..sizes[k]))
        } else {
            let mut j = rng.random_range(0..total);
            let mut ti = 0;
            while j >= sizes[ti] {
                j -= sizes[ti];
                ti += 1;
            }
            (ti, j)
        };
        let orig = model.params.tensors()[ti].data[i];
        model.params.tensors_mut()[ti].data[i] = orig + h;
        let lp = batch_loss(model, batch, weights, objective, dropout_seeds, mode);
        model.params.tensors_mut()[ti].data[i] = orig - h;
        let lm = batch_loss(model, batch, weights, objective, dropout_seeds, mode);
        model.params.tensors_mut()[ti].data[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[ti].1[i];
        let e = rel_err(a, numeric);
        if e > out.max_rel_err || out.worst.is_empty() {
            out.max_rel_err = out.max_rel_err.max(e);
            out.worst = format!("{}[{i}]: analytic {a} numeric {numeric}", analytic[ti].0);
        }
    }
    out
}
