//! Subcommands of the `wordground` binary, usable as a library.

pub mod config;
pub mod provenance;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wordground::corpus::{
    generate_synthetic_corpus, load_manifest, SplitAssignment, SyntheticCorpusSpec,
};
use wordground::evaluation::{
    collect_posteriors, confusion, extract_boundaries, gamma_sweep, DetectionConfig, MacroScore, PosteriorDump,
    SweepResult,
};
use wordground::features::{compute_logmel, pad_or_clip, FeatureParams, FeatureStore};
use wordground::infotheory::{label_prior, lexicon_quality_eq1, model_quality_eq2, JointDistribution, LexiconQuality, ModelQuality};
use wordground::model::{LayerId, Model, Variant};
use wordground::probe::{
    compute_psi, layer_summary, load_alignments, midframe_activations, summary_tsv, FreqReduce, PsiConfig,
};
use wordground::training::experiment::{average_runs, prepare_data, run_name, write_report, RunSummary};
use wordground::training::{run_experiment, ExperimentReport, RunOutcome};
use wordground::Parallelism;

pub use config::RunConfig;
pub use provenance::Provenance;

/// Environment variable overriding the output directory of `train`.
pub const ENV_OUTPUT: &str = "WORDGROUND_OUTPUT";
/// Environment variable setting the worker thread count.
pub const ENV_THREADS: &str = "WORDGROUND_THREADS";

/// Parallelism for a thread count; one thread means the sequential path.
pub fn parallelism(threads: Option<usize>) -> Parallelism {
    let n = threads.or_else(|| std::env::var(ENV_THREADS).ok().and_then(|v| v.parse().ok()));
    match n {
        Some(1) => Parallelism::Sequential,
        Some(n) if n > 1 => {
            wordground::parallel::init_threads(n);
            Parallelism::Rayon
        }
        _ => Parallelism::Rayon,
    }
}

/// Machine-parsable single-line rendering of an error: `error<TAB>kind<TAB>message`.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e.chain().find_map(|c| c.downcast_ref::<wordground::Error>()).map(|w| w.kind()).unwrap_or("cli");
    let msg = format!("{e:#}").replace(['\n', '\t'], " ");
    format!("error\t{kind}\t{msg}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub n_utterances: usize,
}

/// Renders a synthetic corpus into `out/manifest.jsonl` and `out/features.wgfs`.
pub fn cmd_synth(spec: &SyntheticCorpusSpec, out: &Path) -> Result<SynthOutput> {
    let corpus = generate_synthetic_corpus(spec)?;
    fs::create_dir_all(out)?;
    let manifest = out.join("manifest.jsonl");
    let features = out.join("features.wgfs");
    corpus.manifest.save(&manifest)?;
    corpus.store.write(&features)?;
    let onsets: String = corpus.keyword_onsets.iter().map(|(id, o)| format!("{id}\t{o}\n")).collect();
    fs::write(out.join("keyword_onsets.tsv"), format!("utterance_id\tonset_frame\n{onsets}"))?;
    let spec_text = toml::to_string(spec)?;
    fs::write(out.join("synth.toml"), &spec_text)?;
    Provenance::new("synth", &spec_text, vec![spec.seed]).write(out)?;
    Ok(SynthOutput { manifest, features, n_utterances: corpus.manifest.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrepareOutcome {
    Computed(usize),
    /// The store already holds every utterance with the requested parameters.
    Skipped,
}

fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let spec = r.spec();
    let ch = spec.channels as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>().map(|s| s.map(|v| v as f32 / scale)).collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f32>() / ch as f32).collect();
    Ok((mono, spec.sample_rate))
}

/// Computes padded log-Mel features for every manifest record whose
/// `audio_ref` is a WAV path relative to `audio_root`.
pub fn cmd_prepare(
    manifest_path: &Path,
    audio_root: &Path,
    params: &FeatureParams,
    frames: usize,
    out: &Path,
) -> Result<PrepareOutcome> {
    params.validate()?;
    let manifest = load_manifest(manifest_path)?;
    if out.exists() {
        if let Ok(existing) = FeatureStore::read(out) {
            let complete = existing.params() == params
                && manifest
                    .records
                    .iter()
                    .all(|r| existing.get(&r.utterance_id).is_some_and(|s| s.n_frames() == frames));
            if complete {
                return Ok(PrepareOutcome::Skipped);
            }
        }
    }
    let mut store = FeatureStore::new(params.clone());
    for r in &manifest.records {
        if r.audio_ref.starts_with("features:") {
            bail!("utterance {} has no audio ({}) and no materialized features", r.utterance_id, r.audio_ref);
        }
        let (wav, rate) = read_wav(&audio_root.join(&r.audio_ref))?;
        if rate != params.sample_rate_hz {
            bail!("{}: sample rate {rate} Hz, expected {} Hz", r.audio_ref, params.sample_rate_hz);
        }
        let spec = compute_logmel(&wav, params).with_context(|| format!("utterance {}", r.utterance_id))?;
        store.insert(r.utterance_id.clone(), pad_or_clip(&spec, frames)?)?;
    }
    store.write(out)?;
    let text = format!("{}\nframes = {frames}\n", toml::to_string(params)?);
    let dir = out.parent().unwrap_or(Path::new("."));
    Provenance::new("prepare", &text, vec![]).input(manifest_path)?.write(dir)?;
    Ok(PrepareOutcome::Computed(store.len()))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    pub variants: Option<Vec<Variant>>,
    pub seeds: Option<Vec<u64>>,
}

/// Trains every configured (variant, seed) pair and evaluates it on the
/// test split. Writes per-run directories and seed-averaged curves.
pub fn cmd_train(config_path: &Path, ov: &TrainOverrides) -> Result<ExperimentReport> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(o) = ov.output.clone().or_else(|| std::env::var_os(ENV_OUTPUT).map(PathBuf::from)) {
        cfg.paths.output = o;
    }
    if let Some(v) = &ov.variants {
        cfg.experiment.variants = v.clone();
    }
    if let Some(s) = &ov.seeds {
        cfg.experiment.seeds = s.clone();
    }
    cfg.validate()?;
    let mode = parallelism(ov.threads);
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let store = FeatureStore::read(&cfg.paths.features)?;
    if store.params() != &cfg.features {
        bail!("feature store parameters differ from the [features] section");
    }
    let out = &cfg.paths.output;
    fs::create_dir_all(out)?;
    let spec = cfg.experiment_spec();
    let data = prepare_data(&manifest, &spec)?;
    fs::write(out.join("split.json"), serde_json::to_string_pretty(&data.split)?)?;
    let text = cfg.to_toml()?;
    fs::write(out.join("config.toml"), &text)?;
    let report = run_experiment(&manifest, &store, &spec, &cfg.experiment.variants, &cfg.experiment.seeds, mode, Some(out))?;
    Provenance::new("train", &text, cfg.experiment.seeds.clone())
        .input(&cfg.paths.manifest)?
        .input(&cfg.paths.features)?
        .write(out)?;
    Ok(report)
}

/// Which utterances `evaluate` scores.
#[derive(Debug, Clone)]
pub enum EvalSelection {
    All,
    /// The test split of a `split.json` written by `train`.
    TestSplit(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub variant: Variant,
    pub seed: u64,
    pub n_utterances: usize,
    pub best: MacroScore,
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    manifest_path: &Path,
    features: &Path,
    selection: &EvalSelection,
    detection: &DetectionConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<SweepResult> {
    let mode = parallelism(threads);
    let (model, meta) = Model::load(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    let store = FeatureStore::read(features)?;
    let ids: Vec<String> = match selection {
        EvalSelection::All => manifest.records.iter().map(|r| r.utterance_id.clone()).collect(),
        EvalSelection::TestSplit(p) => {
            let split: SplitAssignment = serde_json::from_str(&fs::read_to_string(p)?)?;
            split.test_ids
        }
    };
    let labels = ids
        .iter()
        .map(|id| manifest.find(id).map(|r| r.label).with_context(|| format!("utterance {id} not in manifest")))
        .collect::<Result<Vec<_>>>()?;
    let vocab = manifest.vocabulary.classes().to_vec();
    let dump = collect_posteriors(&model, &store, &ids, &labels, &vocab, mode)?;
    let post = dump.matrix()?;
    let sweep = gamma_sweep(post.view(), &labels, &vocab, detection)?;
    let conf = confusion(post.view(), &labels, &vocab)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.tsv"), sweep.table.to_tsv())?;
    fs::write(out.join("macro.tsv"), sweep.table.macro_tsv())?;
    fs::write(out.join("confusion.tsv"), conf.to_tsv())?;
    fs::write(out.join("posteriors.json"), serde_json::to_string(&dump)?)?;

    let stride = model.config().temporal_stride();
    let specs: Vec<_> = ids.iter().map(|id| store.require(id).cloned()).collect::<wordground::Result<_>>()?;
    let outs = model.forward(&specs, &[], mode)?;
    let mut b = String::from("utterance_id\tboundaries_s\n");
    for (id, o) in ids.iter().zip(&outs) {
        let valid = o.frame_posteriors.slice(ndarray_rows(o.valid_frames));
        let times = extract_boundaries(valid, stride, model.config().frame_hop_ms);
        let list: Vec<String> = times.iter().map(|t| format!("{t:.3}")).collect();
        b.push_str(&format!("{id}\t{}\n", list.join(",")));
    }
    fs::write(out.join("boundaries.tsv"), b)?;

    let summary = EvalSummary {
        checkpoint: checkpoint.display().to_string(),
        variant: model.config().variant,
        seed: meta.seed,
        n_utterances: ids.len(),
        best: sweep.best.clone(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let text = serde_json::to_string(detection)?;
    Provenance::new("evaluate", &text, vec![meta.seed])
        .input(checkpoint)?
        .input(manifest_path)?
        .input(features)?
        .write(out)?;
    Ok(sweep)
}

fn ndarray_rows(n: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    ndarray::s![..n, ..]
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub layers: Option<Vec<LayerId>>,
    pub phones: Option<Vec<String>>,
    pub reduce: FreqReduce,
    pub psi: PsiConfig,
    pub threads: Option<usize>,
}

/// Writes one PSI table per layer plus `layer_summary.tsv`.
pub fn cmd_probe(checkpoint: &Path, features: &Path, alignments: &Path, opts: &ProbeOptions, out: &Path) -> Result<()> {
    let mode = parallelism(opts.threads);
    let (model, meta) = Model::load(checkpoint)?;
    let store = FeatureStore::read(features)?;
    let al = load_alignments(alignments, opts.phones.as_deref())?;
    let layers = opts.layers.clone().unwrap_or_else(|| model.layers());
    let samples = midframe_activations(&model, &store, &al, &layers, opts.reduce, mode)?;
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for ls in &samples.layers {
        let r = compute_psi(ls, &samples.phones, &opts.psi)?;
        fs::write(out.join(format!("psi_{}.tsv", ls.layer)), r.to_tsv())?;
        reports.push(r);
    }
    let mut summary = format!(
        "# segments_used\t{}\n# segments_skipped\t{}\n# t_test\t{:?}\n# reduce\t{:?}\n",
        samples.used_segments, samples.skipped_segments, opts.psi.t_test, opts.reduce
    );
    if !reports.is_empty() {
        summary.push_str(&summary_tsv(&layer_summary(&reports)?));
    }
    fs::write(out.join("layer_summary.tsv"), summary)?;
    let text = serde_json::to_string(&opts.psi)?;
    Provenance::new("probe", &text, vec![meta.seed])
        .input(checkpoint)?
        .input(features)?
        .input(alignments)?
        .write(out)?;
    Ok(())
}

/// Source of the class prior for the model-based quality estimate.
#[derive(Debug, Clone)]
pub enum PriorSource {
    /// Label frequencies of the posterior dump itself.
    DumpLabels,
    /// Training-split label frequencies.
    TrainSplit { manifest: PathBuf, split: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub model: ModelQuality,
    /// Lexicon quality of the (argmax prediction, label) contingency table.
    pub argmax_joint: LexiconQuality,
    pub prior_source: String,
}

pub fn cmd_quality(posteriors: &Path, prior: &PriorSource, out: &Path) -> Result<QualityReport> {
    let dump: PosteriorDump = serde_json::from_str(&fs::read_to_string(posteriors)?)?;
    let m = dump.matrix()?;
    let v = dump.vocabulary.len();
    let (p, src) = match prior {
        PriorSource::DumpLabels => (label_prior(&dump.labels, v)?, "posterior dump labels".to_string()),
        PriorSource::TrainSplit { manifest, split } => {
            let man = load_manifest(manifest)?;
            if man.vocabulary.classes() != dump.vocabulary.as_slice() {
                bail!("manifest vocabulary differs from the posterior dump's");
            }
            let split: SplitAssignment = serde_json::from_str(&fs::read_to_string(split)?)?;
            let labels = split
                .train_ids
                .iter()
                .map(|id| man.find(id).map(|r| r.label).with_context(|| format!("utterance {id} not in manifest")))
                .collect::<Result<Vec<_>>>()?;
            (label_prior(&labels, v)?, "training split label frequencies".to_string())
        }
    };
    let model = model_quality_eq2(m.view(), &p)?;
    let mut counts = ndarray::Array2::<f64>::zeros((v, v));
    for (row, &l) in m.rows().into_iter().zip(&dump.labels) {
        let pred = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
        counts[[pred, l]] += 1.0;
    }
    let argmax_joint = lexicon_quality_eq1(&JointDistribution::from_counts(counts.view())?)?;
    let report = QualityReport { model, argmax_joint, prior_source: src };
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Rebuilds seed-averaged tables from the run directories under `run_dir`.
pub fn cmd_report(run_dir: &Path) -> Result<ExperimentReport> {
    let mut runs = Vec::new();
    let mut variants: Vec<Variant> = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(run_dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for dir in entries {
        let f = dir.join("summary.json");
        if !f.is_file() {
            continue;
        }
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(&f)?).with_context(|| format!("{}", f.display()))?;
        if dir.file_name().and_then(|n| n.to_str()) != Some(run_name(s.variant, s.seed).as_str()) {
            continue;
        }
        if !variants.contains(&s.variant) {
            variants.push(s.variant);
        }
        runs.push(s.into_row());
    }
    // failed runs are only known from the training report
    if let Ok(text) = fs::read_to_string(run_dir.join("report.json")) {
        if let Ok(prev) = serde_json::from_str::<ExperimentReport>(&text) {
            for r in prev.runs {
                if matches!(r.outcome, RunOutcome::Failed { .. }) {
                    if !variants.contains(&r.variant) {
                        variants.push(r.variant);
                    }
                    runs.push(r);
                }
            }
        }
    }
    if runs.is_empty() {
        bail!("no run directories found under {}", run_dir.display());
    }
    variants.sort();
    let averages = average_runs(&runs, &variants);
    let report = ExperimentReport { runs, averages };
    write_report(&report, run_dir)?;
    Ok(report)
}

/// Parses a comma-separated list.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| anyhow::anyhow!("bad list item {x:?}: {e}")))
        .collect()
}

/// Parses `0.1,0.2` into an explicit γ grid.
pub fn parse_grid(s: &str) -> Result<DetectionConfig> {
    let cfg = DetectionConfig { gamma_grid: parse_list(s)? };
    cfg.validate()?;
    Ok(cfg)
}
