//! Multi-variant, multi-seed experiment runner.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{apply_attention_noise, stratified_split, CorpusManifest, SplitAssignment};
use crate::error::{Error, Result};
use crate::evaluation::{collect_posteriors, gamma_sweep, DetectionConfig, MacroScore, PosteriorDump, SweepResult};
use crate::features::FeatureStore;
use crate::model::{CheckpointMeta, Model, ModelConfig, Variant};
use crate::parallel::Parallelism;

use super::{train, OptimizerConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub detection: DetectionConfig,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Replace labels of unattended train/val utterances with random ones.
    pub noise_seed: Option<u64>,
    /// Permute train/val labels (chance-level control).
    pub shuffle_labels_seed: Option<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            detection: DetectionConfig::default(),
            train_fraction: 0.8,
            val_fraction: 0.2,
            split_seed: 0,
            noise_seed: None,
            shuffle_labels_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub state: TrainState,
    pub sweep: SweepResult,
    #[serde(skip)]
    pub posteriors: Option<PosteriorDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed(Box<RunResult>),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAverage {
    pub variant: Variant,
    /// Runs entering the average.
    pub n_runs: usize,
    pub n_failed: usize,
    /// Seed-averaged macro curve, one point per γ.
    pub curve: Vec<MacroScore>,
    pub best: Option<MacroScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunRow>,
    pub averages: Vec<VariantAverage>,
}

impl ExperimentReport {
    pub fn average(&self, v: Variant) -> Option<&VariantAverage> {
        self.averages.iter().find(|a| a.variant == v)
    }
}

/// Averages completed runs of each variant over seeds.
pub fn average_runs(runs: &[RunRow], variants: &[Variant]) -> Vec<VariantAverage> {
    variants
        .iter()
        .map(|&v| {
            let rows: Vec<&RunRow> = runs.iter().filter(|r| r.variant == v).collect();
            let done: Vec<&RunResult> = rows
                .iter()
                .filter_map(|r| match &r.outcome {
                    RunOutcome::Completed(res) => Some(res.as_ref()),
                    RunOutcome::Failed { .. } => None,
                })
                .collect();
            let curve = average_curves(&done.iter().map(|r| curve_of(&r.sweep)).collect::<Vec<_>>());
            let mut best: Option<MacroScore> = None;
            for p in &curve {
                if best.as_ref().is_none_or(|b| p.f > b.f) {
                    best = Some(p.clone());
                }
            }
            VariantAverage { variant: v, n_runs: done.len(), n_failed: rows.len() - done.len(), curve, best }
        })
        .collect()
}

fn curve_of(s: &SweepResult) -> Vec<MacroScore> {
    s.table.rows.iter().map(|r| r.macro_avg.clone()).collect()
}

fn average_curves(curves: &[Vec<MacroScore>]) -> Vec<MacroScore> {
    let Some(first) = curves.first() else { return Vec::new() };
    let k = curves.len() as f64;
    (0..first.len())
        .map(|i| {
            let pts: Vec<&MacroScore> = curves.iter().map(|c| &c[i]).collect();
            MacroScore {
                gamma: first[i].gamma,
                precision: pts.iter().map(|p| p.precision).sum::<f64>() / k,
                recall: pts.iter().map(|p| p.recall).sum::<f64>() / k,
                f: pts.iter().map(|p| p.f).sum::<f64>() / k,
                n_words: first[i].n_words,
            }
        })
        .collect()
}

/// Runs `runner` for every (variant, seed) pair. A failing run is recorded
/// and the remaining runs continue.
pub fn run_experiment_with<F>(variants: &[Variant], seeds: &[u64], mut runner: F) -> Result<ExperimentReport>
where
    F: FnMut(Variant, u64) -> Result<RunResult>,
{
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one variant and one seed".into()));
    }
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let outcome = match runner(variant, seed) {
                Ok(r) => RunOutcome::Completed(Box::new(r)),
                Err(e) => RunOutcome::Failed { error: e.to_string() },
            };
            runs.push(RunRow { variant, seed, outcome });
        }
    }
    let averages = average_runs(&runs, variants);
    Ok(ExperimentReport { runs, averages })
}

/// Train/val labels as seen by the learner, test labels kept clean.
pub struct PreparedData {
    pub split: SplitAssignment,
    pub train_manifest: CorpusManifest,
    pub test_ids: Vec<String>,
    pub test_labels: Vec<usize>,
}

pub fn prepare_data(manifest: &CorpusManifest, spec: &ExperimentSpec) -> Result<PreparedData> {
    let split = stratified_split(manifest, spec.train_fraction, spec.val_fraction, spec.split_seed)?;
    let mut learner = match spec.noise_seed {
        Some(s) => apply_attention_noise(manifest, s),
        None => manifest.clone(),
    };
    if let Some(s) = spec.shuffle_labels_seed {
        let pool = split.train_pool();
        let idx: Vec<usize> = (0..learner.records.len()).filter(|&i| pool.contains(&learner.records[i].utterance_id)).collect();
        let mut labels: Vec<usize> = idx.iter().map(|&i| learner.records[i].label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        for (&i, l) in idx.iter().zip(labels) {
            learner.records[i].label = l;
        }
    }
    let test_set = split.test_set();
    let train_manifest = learner.subset(&split.train_pool());
    let test_ids: Vec<String> = split.test_ids.clone();
    let test_labels = test_ids
        .iter()
        .map(|id| manifest.find(id).map(|r| r.label).ok_or_else(|| Error::InvalidArgument(format!("unknown id {id}"))))
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(test_ids.iter().all(|id| test_set.contains(id)));
    Ok(PreparedData { split, train_manifest, test_ids, test_labels })
}

/// Trains one variant with one seed and evaluates it on the clean test split.
pub fn run_single(
    data: &PreparedData,
    store: &FeatureStore,
    spec: &ExperimentSpec,
    variant: Variant,
    seed: u64,
    mode: Parallelism,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let cfg = ModelConfig { variant, ..spec.model.clone() };
    let opt = OptimizerConfig { seed, ..spec.optimizer.clone() };
    let mut model = Model::<f32>::build(cfg, seed)?;
    let mut state = train(&mut model, &data.train_manifest, &data.split, store, &opt, mode)?;
    let vocab = data.train_manifest.vocabulary.classes().to_vec();
    let dump = collect_posteriors(&model, store, &data.test_ids, &data.test_labels, &vocab, mode)?;
    let sweep = gamma_sweep(dump.matrix()?.view(), &dump.labels, &vocab, &spec.detection)?;
    if let Some(dir) = out_dir {
        let run_dir = dir.join(run_name(variant, seed));
        fs::create_dir_all(&run_dir)?;
        let meta = CheckpointMeta { epoch: state.best_epoch, seed, val_loss: Some(state.best_val_loss) };
        let ck = run_dir.join("model.wgck");
        model.save(&ck, &meta)?;
        state.checkpoint = Some(ck.display().to_string());
        fs::write(run_dir.join("history.tsv"), state.history_tsv(false))?;
        fs::write(run_dir.join("timing.tsv"), state.history_tsv(true))?;
        fs::write(run_dir.join("metrics.tsv"), sweep.table.to_tsv())?;
        fs::write(run_dir.join("macro.tsv"), sweep.table.macro_tsv())?;
        fs::write(run_dir.join("posteriors.json"), serde_json::to_string(&dump)?)?;
        let summary = RunSummary { variant, seed, sweep: sweep.clone(), state: state.clone() };
        fs::write(run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(RunResult { state, sweep, posteriors: Some(dump) })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub sweep: SweepResult,
    pub state: TrainState,
}

impl RunSummary {
    /// Completed experiment row without the posterior dump.
    pub fn into_row(self) -> RunRow {
        let result = RunResult { state: self.state, sweep: self.sweep, posteriors: None };
        RunRow { variant: self.variant, seed: self.seed, outcome: RunOutcome::Completed(Box::new(result)) }
    }
}

pub fn run_name(variant: Variant, seed: u64) -> String {
    format!("{}_seed{seed}", variant.name())
}

/// Trains and evaluates every (variant, seed) pair. With `out_dir`, per-run
/// artifacts and the seed-averaged curves are written there.
pub fn run_experiment(
    manifest: &CorpusManifest,
    store: &FeatureStore,
    spec: &ExperimentSpec,
    variants: &[Variant],
    seeds: &[u64],
    mode: Parallelism,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    spec.detection.validate()?;
    let data = prepare_data(manifest, spec)?;
    let report = run_experiment_with(variants, seeds, |v, s| run_single(&data, store, spec, v, s, mode, out_dir))?;
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Writes `report.json`, `runs.tsv` and one averaged curve per variant.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut runs = String::from("variant\tseed\tstatus\tbest_gamma\tmacro_f\tbest_epoch\terror\n");
    for r in &report.runs {
        match &r.outcome {
            RunOutcome::Completed(res) => runs.push_str(&format!(
                "{}\t{}\tok\t{:.2}\t{:.6}\t{}\t\n",
                r.variant, r.seed, res.sweep.best.gamma, res.sweep.best.f, res.state.best_epoch
            )),
            RunOutcome::Failed { error } => {
                runs.push_str(&format!("{}\t{}\tfailed\t\t\t\t{}\n", r.variant, r.seed, error.replace(['\t', '\n'], " ")))
            }
        }
    }
    fs::write(dir.join("runs.tsv"), runs)?;
    for a in &report.averages {
        let mut s = format!("# variant\t{}\n# n_runs\t{}\n# n_failed\t{}\n", a.variant, a.n_runs, a.n_failed);
        s.push_str("gamma\tprecision\trecall\tf\n");
        for p in &a.curve {
            s.push_str(&format!("{:.2}\t{:.6}\t{:.6}\t{:.6}\n", p.gamma, p.precision, p.recall, p.f));
        }
        fs::write(dir.join(format!("averaged_{}.tsv", a.variant.name())), s)?;
    }
    Ok(())
}
