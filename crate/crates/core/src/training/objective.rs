//! Training objective: weighted VP cross-entropy + lambda * AE RMSE + L2.

use ndarray::Array2;

use crate::model::network::{self, Heads};
use crate::model::{Model, Params};
use crate::parallel::{self, Parallelism};
use crate::real::Real;

use super::losses::{ae_loss_prefix, vp_loss_normalized, vp_loss_normalized_grad};

/// One padded training input with its target distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T = f32> {
    pub id: String,
    /// `[input_frames, input_bands]`
    pub x: Array2<T>,
    pub n_valid: usize,
    pub target: Vec<T>,
}

impl<T: Real> Example<T> {
    pub fn cast<U: Real>(&self) -> Example<U> {
        Example {
            id: self.id.clone(),
            x: self.x.mapv(|v| U::of(v.as_f64())),
            n_valid: self.n_valid,
            target: self.target.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `vp + lambda_ae * ae`
    Joint { lambda_ae: f64 },
    /// Reconstruction only (AE pre-training).
    AeOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub vp: f64,
    pub ae: f64,
}

impl Objective {
    pub fn combine(self, parts: LossParts) -> f64 {
        match self {
            Objective::Joint { lambda_ae } => parts.vp + lambda_ae * parts.ae,
            Objective::AeOnly => parts.ae,
        }
    }
}

/// Data loss of one example and, optionally, its parameter gradient.
pub(crate) fn sample<T: Real>(
    model: &Model<T>,
    ex: &Example<T>,
    weights: &[T],
    objective: Objective,
    dropout_seed: Option<u64>,
    want_grad: bool,
) -> (LossParts, Option<Params<T>>) {
    let cfg = model.config();
    let has_dec = cfg.variant.has_decoder();
    let (use_vp, ae_scale) = match objective {
        Objective::Joint { lambda_ae } => (true, lambda_ae),
        Objective::AeOnly => (false, 1.0),
    };
    let heads = Heads { vp: use_vp, ae: has_dec };
    let tr = model.trace(&ex.x, ex.n_valid, dropout_seed, heads);

    let mut parts = LossParts::default();
    let mut d_utt = None;
    if let Some(utt) = &tr.utt {
        let p = utt.as_slice().expect("contiguous");
        parts.vp = vp_loss_normalized(p, &ex.target, weights).as_f64();
        if want_grad {
            d_utt = Some(vp_loss_normalized_grad(p, &ex.target, weights));
        }
    }
    let mut d_recon = None;
    if let Some(dec) = &tr.dec {
        let (target, valid) = model.ae_target(&ex.x, ex.n_valid);
        let (rmse, mut g) = ae_loss_prefix(&dec.recon, &target, valid);
        parts.ae = rmse.as_f64();
        if want_grad && ae_scale != 0.0 {
            g.mapv_inplace(|v| v * T::of(ae_scale));
            d_recon = Some(g);
        }
    }
    let grad = want_grad
        .then(|| network::backward(&model.params, cfg, ex.x.view(), &tr, d_utt.as_ref(), d_recon.as_ref()));
    (parts, grad)
}

/// Batch loss (mean data loss + L2 penalty) and gradient.
pub fn batch_gradient<T: Real>(
    model: &Model<T>,
    batch: &[&Example<T>],
    weights: &[T],
    objective: Objective,
    dropout_seeds: Option<&[u64]>,
    mode: Parallelism,
) -> (f64, LossParts, Params<T>) {
    let results = parallel::map(mode, batch, |i, ex| {
        sample(model, ex, weights, objective, dropout_seeds.map(|s| s[i]), true)
    });
    let n = batch.len().max(1) as f64;
    let mut grad = model.params.zeros_like();
    let mut parts = LossParts::default();
    for (p, g) in results {
        parts.vp += p.vp / n;
        parts.ae += p.ae / n;
        grad.add_scaled(&g.expect("gradient requested"), T::one());
    }
    grad.scale(T::of(1.0 / n));
    let lambda = T::of(model.config().l2_lambda);
    model.params.add_l2_grad(lambda, &mut grad);
    let total = objective.combine(parts) + model.params.l2_penalty(lambda).as_f64();
    (total, parts, grad)
}

/// Batch loss as in [`batch_gradient`], without the backward pass.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    batch: &[&Example<T>],
    weights: &[T],
    objective: Objective,
    dropout_seeds: Option<&[u64]>,
    mode: Parallelism,
) -> f64 {
    let parts = mean_parts(model, batch, weights, objective, dropout_seeds, mode);
    let lambda = T::of(model.config().l2_lambda);
    objective.combine(parts) + model.params.l2_penalty(lambda).as_f64()
}

/// Mean data-loss parts over `batch` (no penalty).
pub fn mean_parts<T: Real>(
    model: &Model<T>,
    batch: &[&Example<T>],
    weights: &[T],
    objective: Objective,
    dropout_seeds: Option<&[u64]>,
    mode: Parallelism,
) -> LossParts {
    let results = parallel::map(mode, batch, |i, ex| {
        sample(model, ex, weights, objective, dropout_seeds.map(|s| s[i]), false).0
    });
    let n = batch.len().max(1) as f64;
    results.into_iter().fold(LossParts::default(), |acc, p| LossParts { vp: acc.vp + p.vp / n, ae: acc.ae + p.ae / n })
}
