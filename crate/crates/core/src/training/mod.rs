//! Losses, optimizer, early stopping and the training loop.

mod adam;
mod early_stop;
pub mod experiment;
pub mod gradcheck;
mod losses;
pub mod objective;

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, SplitAssignment};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{Model, Params, Variant};
use crate::parallel::Parallelism;
use crate::real::Real;

pub use adam::Adam;
pub use early_stop::EarlyStopping;
pub use experiment::{run_experiment, run_experiment_with, ExperimentReport, ExperimentSpec, RunOutcome, RunResult};
pub use losses::{ae_loss, compute_class_weights, normalize_posterior, target_from_bag, vp_loss, ClassWeights, LOG_EPS};
pub use objective::{Example, LossParts, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub minibatch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Weight of the reconstruction loss in the joint objective.
    pub loss_mix: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            minibatch_size: 50,
            patience: 10,
            max_epochs: 200,
            loss_mix: 1.0,
            seed: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.loss_mix >= 0.0 && self.loss_mix.is_finite()) {
            return bad("loss_mix must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Reconstruction-only pre-training.
    Pretrain,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub vp_loss: f64,
    pub ae_loss: f64,
    pub val_loss: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub history: Vec<EpochRecord>,
    /// Best epoch of the joint phase (1-based).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub pretrain_best_epoch: Option<usize>,
    pub checkpoint: Option<String>,
}

impl TrainState {
    pub fn joint_history(&self) -> impl Iterator<Item = &EpochRecord> {
        self.history.iter().filter(|r| r.phase == Phase::Joint)
    }

    /// Columnar history; `wall_s` is omitted when `with_wall` is false so that
    /// the file is reproducible byte-for-byte.
    pub fn history_tsv(&self, with_wall: bool) -> String {
        let mut s = String::from("phase\tepoch\tvp_loss\tae_loss\tval_loss");
        s.push_str(if with_wall { "\twall_s\n" } else { "\n" });
        for r in &self.history {
            let phase = match r.phase {
                Phase::Pretrain => "pretrain",
                Phase::Joint => "joint",
            };
            s.push_str(&format!("{phase}\t{}\t{:.9}\t{:.9}\t{:.9}", r.epoch, r.vp_loss, r.ae_loss, r.val_loss));
            if with_wall {
                s.push_str(&format!("\t{:.3}", r.wall_s));
            }
            s.push('\n');
        }
        s
    }
}

/// Observer invoked after every epoch; used for progress logging.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Builds padded training inputs for `ids` with targets from `manifest`.
pub fn prepare_examples(
    model: &Model<f32>,
    manifest: &CorpusManifest,
    ids: &[String],
    store: &FeatureStore,
) -> Result<Vec<Example<f32>>> {
    let n_classes = manifest.vocabulary.len();
    ids.iter()
        .map(|id| {
            let rec = manifest
                .find(id)
                .ok_or_else(|| Error::InvalidArgument(format!("utterance {id} not in manifest")))?;
            let spec = store.require(id)?;
            let (x, n_valid) = model.prepare_input(spec)?;
            let target = target_from_bag(&[rec.label], n_classes)?.into_iter().map(|v| v as f32).collect();
            Ok(Example { id: id.clone(), x, n_valid, target })
        })
        .collect()
}

/// Trains `model` on the train split of `manifest` with early stopping on the
/// validation split. Labels are taken from `manifest` as given.
pub fn train(
    model: &mut Model<f32>,
    manifest: &CorpusManifest,
    split: &SplitAssignment,
    store: &FeatureStore,
    opt: &OptimizerConfig,
    mode: Parallelism,
) -> Result<TrainState> {
    model.check_vocabulary(manifest.vocabulary.len())?;
    let train_ids: HashSet<String> = split.train_ids.iter().cloned().collect();
    let counts = manifest.subset(&train_ids).class_counts();
    let weights = compute_class_weights(&counts)?;
    let train_set = prepare_examples(model, manifest, &split.train_ids, store)?;
    let val_set = prepare_examples(model, manifest, &split.val_ids, store)?;
    train_examples(model, &train_set, &val_set, &weights, opt, mode, None)
}

/// Training loop over prepared examples. With an empty validation set the
/// training loss is monitored instead.
pub fn train_examples(
    model: &mut Model<f32>,
    train_set: &[Example<f32>],
    val_set: &[Example<f32>],
    weights: &ClassWeights,
    opt: &OptimizerConfig,
    mode: Parallelism,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainState> {
    opt.validate()?;
    model.config().validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    model.check_vocabulary(weights.len())?;
    let w: Vec<f32> = weights.weight.iter().map(|&v| v as f32).collect();
    let mut history = Vec::new();
    let mut pretrain_best_epoch = None;

    if model.config().variant == Variant::AePretrain {
        let run = run_phase(model, train_set, val_set, &w, opt, Objective::AeOnly, Phase::Pretrain, mode, &mut hook)?;
        pretrain_best_epoch = Some(run.best_epoch);
        history.extend(run.history);
    }
    let joint = Objective::Joint { lambda_ae: opt.loss_mix };
    let run = run_phase(model, train_set, val_set, &w, opt, joint, Phase::Joint, mode, &mut hook)?;
    history.extend(run.history);
    Ok(TrainState {
        history,
        best_epoch: run.best_epoch,
        best_val_loss: run.best_loss,
        stop_reason: run.reason,
        pretrain_best_epoch,
        checkpoint: None,
    })
}

struct PhaseRun {
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_loss: f64,
    reason: StopReason,
}

/// Seed of the dropout masks for one sample of one minibatch.
pub(crate) fn dropout_seed(seed: u64, phase: Phase, epoch: usize, batch: usize, index: usize) -> u64 {
    let mut h = splitmix(seed ^ 0x5eed_0f_d20f_u64);
    for v in [phase as u64, epoch as u64, batch as u64, index as u64] {
        h = splitmix(h ^ v);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Validation objective: mean data loss without dropout or penalty.
pub fn validation_loss<T: Real>(
    model: &Model<T>,
    set: &[Example<T>],
    weights: &[T],
    objective: Objective,
    mode: Parallelism,
) -> f64 {
    let refs: Vec<&Example<T>> = set.iter().collect();
    objective.combine(objective::mean_parts(model, &refs, weights, objective, None, mode))
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut Model<f32>,
    train_set: &[Example<f32>],
    val_set: &[Example<f32>],
    w: &[f32],
    opt: &OptimizerConfig,
    objective: Objective,
    phase: Phase,
    mode: Parallelism,
    hook: &mut Option<EpochHook<'_>>,
) -> Result<PhaseRun> {
    let mut adam = Adam::new(&model.params, opt.alpha, opt.beta1, opt.beta2, opt.epsilon);
    let mut stopper = EarlyStopping::new(opt.patience);
    let mut best: Params<f32> = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix(opt.seed ^ ((phase as u64) << 32)));
    let start = Instant::now();
    let mut reason = StopReason::MaxEpochs;

    for epoch in 1..=opt.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossParts::default();
        let n_batches = order.len().div_ceil(opt.minibatch_size);
        for (b, chunk) in order.chunks(opt.minibatch_size).enumerate() {
            let batch: Vec<&Example<f32>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|j| dropout_seed(opt.seed, phase, epoch, b, j)).collect();
            let (total, parts, grad) = objective::batch_gradient(model, &batch, w, objective, Some(&seeds), mode);
            if !total.is_finite() || !grad_is_finite(&grad) {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            adam.update(&mut model.params, &grad);
            let k = batch.len() as f64;
            sum.vp += parts.vp * k;
            sum.ae += parts.ae * k;
        }
        let n = train_set.len() as f64;
        let train_parts = LossParts { vp: sum.vp / n, ae: sum.ae / n };
        let monitored = if val_set.is_empty() {
            validation_loss(model, train_set, w, objective, mode)
        } else {
            validation_loss(model, val_set, w, objective, mode)
        };
        if !monitored.is_finite() {
            return Err(Error::Divergence { epoch, batch: n_batches });
        }
        let rec = EpochRecord {
            phase,
            epoch,
            vp_loss: train_parts.vp,
            ae_loss: train_parts.ae,
            val_loss: monitored,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if let Some(h) = hook.as_mut() {
            h(&rec);
        }
        history.push(rec);
        if stopper.observe(epoch, monitored) {
            best = model.params.clone();
        }
        if stopper.should_stop() {
            reason = StopReason::Patience;
            break;
        }
    }
    model.params = best;
    Ok(PhaseRun { history, best_epoch: stopper.best_epoch(), best_loss: stopper.best(), reason })
}

fn grad_is_finite<T: Real>(g: &Params<T>) -> bool {
    g.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests;
