use super::objective::batch_gradient;
use super::*;
use super::gradcheck::check_gradients;
use crate::model::tests::tiny_config;
use crate::model::ModelConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn examples<T: Real>(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut x = Array2::from_shape_fn((cfg.input_frames, cfg.input_bands), |_| T::of(rng.random_range(-1.0..1.0)));
            let n_valid = cfg.input_frames - 5 * (i % 3);
            for t in n_valid..cfg.input_frames {
                x.row_mut(t).fill(T::of(-3.0));
            }
            let mut target = vec![T::zero(); cfg.d_visual];
            target[i % cfg.d_visual] = T::one();
            Example { id: format!("e{i}"), x, n_valid, target }
        })
        .collect()
}

/// Max relative error between analytic and central-difference gradients over
/// `n_samples` random coordinates.
fn gradient_check(variant: Variant, objective: Objective, n_samples: usize, dropout: bool, h: f64) -> (f64, String) {
    let cfg = ModelConfig { d_visual: 2, ..tiny_config(variant) };
    let mut model = Model::<f64>::build(cfg.clone(), 11).unwrap();
    let ex = examples::<f64>(&cfg, 3, 5);
    let batch: Vec<&Example<f64>> = ex.iter().collect();
    let seeds = [101u64, 202, 303];
    let seeds: Option<&[u64]> = dropout.then_some(&seeds[..]);
    let r = check_gradients(&mut model, &batch, &[0.7, 1.3], objective, seeds, n_samples, h, 99);
    (r.max_rel_err, r.worst)
}

#[test]
fn gradients_match_finite_differences() {
    let joint = Objective::Joint { lambda_ae: 1.0 };
    for v in [Variant::Full, Variant::NoAe, Variant::AeNoBn, Variant::AePred] {
        let (e, at) = gradient_check(v, joint, 120, false, 1e-4);
        assert!(e < 1e-4, "{v}: {e} at {at}");
    }
    let (e, at) = gradient_check(Variant::AePretrain, Objective::AeOnly, 60, false, 1e-4);
    assert!(e < 1e-4, "ae-only: {e} at {at}");
}

#[test]
fn dropout_gradients_match_with_small_step() {
    // Dropped units sit at exactly zero next to small ELU outputs, so max
    // pooling over bands has near-ties; a step below their scale avoids them.
    let joint = Objective::Joint { lambda_ae: 1.0 };
    for v in [Variant::Full, Variant::NoAe] {
        let (e, at) = gradient_check(v, joint, 80, true, 1e-6);
        assert!(e < 1e-3, "{v}: {e} at {at}");
    }
}

#[test]
fn zero_mix_matches_no_ae_branch() {
    let cfg_full = tiny_config(Variant::Full);
    let cfg_no = tiny_config(Variant::NoAe);
    let full = Model::<f64>::build(cfg_full.clone(), 3).unwrap();
    let no = Model::<f64>::build(cfg_no, 3).unwrap();
    let ex = examples::<f64>(&cfg_full, 4, 8);
    let batch: Vec<&Example<f64>> = ex.iter().collect();
    let w = [1.0; 3];
    let seeds = [1, 2, 3, 4];
    let obj = Objective::Joint { lambda_ae: 0.0 };
    let (_, pf, gf) = batch_gradient(&full, &batch, &w, obj, Some(&seeds), Parallelism::Sequential);
    let (_, pn, gn) = batch_gradient(&no, &batch, &w, obj, Some(&seeds), Parallelism::Sequential);
    assert_eq!(pf.vp, pn.vp);
    let shared: Vec<_> = gn.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    for t in gf.tensors() {
        match shared.iter().find(|(n, _)| *n == t.name) {
            Some((_, d)) => assert_eq!(t.data, &d[..], "{}", t.name),
            // decoder weights only see the L2 term
            None => assert!(t.name.starts_with("dec.")),
        }
    }
}

#[test]
fn parallel_and_sequential_gradients_agree() {
    let cfg = tiny_config(Variant::Full);
    let model = Model::<f32>::build(cfg.clone(), 4).unwrap();
    let ex = examples::<f32>(&cfg, 6, 2);
    let batch: Vec<&Example<f32>> = ex.iter().collect();
    let seeds: Vec<u64> = (0..6).collect();
    let obj = Objective::Joint { lambda_ae: 1.0 };
    let a = batch_gradient(&model, &batch, &[1.0; 3], obj, Some(&seeds), Parallelism::Sequential);
    let b = batch_gradient(&model, &batch, &[1.0; 3], obj, Some(&seeds), Parallelism::Rayon);
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
}

fn small_run(variant: Variant, max_epochs: usize) -> (Model<f32>, TrainState, Vec<Example<f32>>, Vec<Example<f32>>) {
    let cfg = tiny_config(variant);
    let mut model = Model::<f32>::build(cfg.clone(), 5).unwrap();
    let train_set = examples::<f32>(&cfg, 12, 20);
    let val_set = examples::<f32>(&cfg, 6, 21);
    let opt = OptimizerConfig { minibatch_size: 4, patience: 3, max_epochs, seed: 9, ..Default::default() };
    let st = train_examples(&mut model, &train_set, &val_set, &ClassWeights::uniform(3), &opt, Parallelism::Sequential, None)
        .unwrap();
    (model, st, train_set, val_set)
}

#[test]
fn training_is_deterministic() {
    let (m1, s1, ..) = small_run(Variant::Full, 4);
    let (m2, s2, ..) = small_run(Variant::Full, 4);
    let strip = |s: &TrainState| s.history.iter().map(|r| (r.epoch, r.vp_loss, r.ae_loss, r.val_loss)).collect::<Vec<_>>();
    assert_eq!(strip(&s1), strip(&s2));
    assert_eq!(m1.params, m2.params);
    assert_eq!(s1.history_tsv(false), s2.history_tsv(false));
}

#[test]
fn restored_parameters_reproduce_best_validation_loss() {
    let (model, st, _, val) = small_run(Variant::Full, 8);
    let best = st.joint_history().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, st.best_val_loss);
    let again = validation_loss(&model, &val, &[1.0; 3], Objective::Joint { lambda_ae: 1.0 }, Parallelism::Sequential);
    assert!((again - best).abs() < 1e-6, "{again} vs {best}");
    assert_eq!(st.history[st.best_epoch - 1].val_loss, best);
}

#[test]
fn training_loss_decreases() {
    let (_, st, ..) = small_run(Variant::Full, 6);
    let h: Vec<f64> = st.history.iter().map(|r| r.vp_loss + r.ae_loss).collect();
    assert!(h.last().unwrap() < &h[0], "{h:?}");
}

#[test]
fn pretrain_runs_two_phases() {
    let (_, st, ..) = small_run(Variant::AePretrain, 3);
    assert!(st.history.iter().any(|r| r.phase == Phase::Pretrain));
    assert!(st.history.iter().any(|r| r.phase == Phase::Joint));
    assert!(st.pretrain_best_epoch.is_some());
    assert!(st.history.iter().filter(|r| r.phase == Phase::Pretrain).all(|r| r.vp_loss == 0.0));
}

#[test]
fn divergence_reports_provenance() {
    let cfg = tiny_config(Variant::NoAe);
    let mut model = Model::<f32>::build(cfg.clone(), 5).unwrap();
    let mut train_set = examples::<f32>(&cfg, 8, 1);
    train_set[5].x[[0, 0]] = f32::NAN;
    let opt = OptimizerConfig { minibatch_size: 4, max_epochs: 2, ..Default::default() };
    let r = train_examples(&mut model, &train_set, &[], &ClassWeights::uniform(3), &opt, Parallelism::Sequential, None);
    match r {
        Err(Error::Divergence { epoch: 1, batch }) => assert!(batch == 1 || batch == 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn optimizer_config_validation() {
    OptimizerConfig::default().validate().unwrap();
    for bad in [
        OptimizerConfig { alpha: 0.0, ..Default::default() },
        OptimizerConfig { beta1: 1.0, ..Default::default() },
        OptimizerConfig { beta2: -0.1, ..Default::default() },
        OptimizerConfig { patience: 0, ..Default::default() },
        OptimizerConfig { minibatch_size: 0, ..Default::default() },
        OptimizerConfig { loss_mix: -1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

