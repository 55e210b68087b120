use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wordground::corpus::SyntheticCorpusSpec;
use wordground::evaluation::DetectionConfig;
use wordground::features::FeatureParams;
use wordground::model::{LayerId, Variant};
use wordground::probe::{FreqReduce, PsiConfig, TTestKind};
use wordground_cli::*;

#[derive(Parser)]
#[command(name = "wordground", version, about = "Visually grounded keyword spotting from weak bag-of-words labels")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reduce {
    Mean,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum TTest {
    Pooled,
    Welch,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic keyword corpus (manifest + feature store).
    Synth {
        /// TOML synthetic corpus spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compute padded log-Mel features from WAV files.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        audio_root: PathBuf,
        /// TOML feature parameters; defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        frames: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train and evaluate every configured variant and seed.
    Train {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Comma-separated, e.g. `full,no-AE`.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Score a checkpoint and sweep the detection threshold.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Restrict to the test ids of a split written by `train`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Comma-separated threshold grid.
        #[arg(long, conflicts_with = "gamma")]
        grid: Option<String>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Phone selectivity of hidden nodes at aligned phone midpoints.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        alignments: PathBuf,
        /// Comma-separated layer names; all layers when omitted.
        #[arg(long)]
        layers: Option<String>,
        /// Comma-separated phone inventory; inferred when omitted.
        #[arg(long)]
        phones: Option<String>,
        #[arg(long, value_enum, default_value_t = Reduce::Mean)]
        reduce: Reduce,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 10)]
        min_samples: usize,
        #[arg(long, value_enum, default_value_t = TTest::Pooled)]
        t_test: TTest,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Normalized mutual information between posteriors and classes.
    Quality {
        #[arg(long)]
        posteriors: PathBuf,
        /// With `--split`, take the class prior from the training split.
        #[arg(long, requires = "split")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        split: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Rebuild seed-averaged tables from a training output directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid {}", p.display()))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { spec, seed, out } => {
            let mut spec: SyntheticCorpusSpec = load_toml(spec.as_ref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let r = cmd_synth(&spec, &out)?;
            println!("wrote {} utterances to {}", r.n_utterances, out.display());
        }
        Cmd::Prepare { manifest, audio_root, params, frames, out } => {
            let params: FeatureParams = load_toml(params.as_ref())?;
            match cmd_prepare(&manifest, &audio_root, &params, frames, &out)? {
                PrepareOutcome::Computed(n) => println!("computed features for {n} utterances"),
                PrepareOutcome::Skipped => println!("{} is up to date", out.display()),
            }
        }
        Cmd::Train { config, out, threads, variants, seeds } => {
            let ov = TrainOverrides {
                output: out,
                threads,
                variants: variants.as_deref().map(parse_list::<Variant>).transpose()?,
                seeds: seeds.as_deref().map(parse_list::<u64>).transpose()?,
            };
            let report = cmd_train(&config, &ov)?;
            for a in &report.averages {
                match &a.best {
                    Some(b) => println!(
                        "{}\truns={}\tfailed={}\tgamma={:.2}\tP={:.3}\tR={:.3}\tF={:.3}",
                        a.variant.name(),
                        a.n_runs,
                        a.n_failed,
                        b.gamma,
                        b.precision,
                        b.recall,
                        b.f
                    ),
                    None => println!("{}\truns=0\tfailed={}", a.variant.name(), a.n_failed),
                }
            }
        }
        Cmd::Evaluate { checkpoint, manifest, features, split, grid, gamma, out, threads } => {
            let detection = match (grid, gamma) {
                (Some(g), _) => parse_grid(&g)?,
                (None, Some(g)) => {
                    let d = DetectionConfig { gamma_grid: vec![g] };
                    d.validate()?;
                    d
                }
                (None, None) => DetectionConfig::default(),
            };
            let selection = split.map_or(EvalSelection::All, EvalSelection::TestSplit);
            let s = cmd_evaluate(&checkpoint, &manifest, &features, &selection, &detection, &out, threads)?;
            println!("best gamma={:.2} P={:.3} R={:.3} F={:.3}", s.best.gamma, s.best.precision, s.best.recall, s.best.f);
        }
        Cmd::Probe { checkpoint, features, alignments, layers, phones, reduce, alpha, min_samples, t_test, out, threads } => {
            let opts = ProbeOptions {
                layers: layers.as_deref().map(parse_list::<LayerId>).transpose()?,
                phones: phones.as_deref().map(parse_list::<String>).transpose()?,
                reduce: match reduce {
                    Reduce::Mean => FreqReduce::Mean,
                    Reduce::Max => FreqReduce::Max,
                },
                psi: PsiConfig {
                    alpha,
                    min_samples,
                    t_test: match t_test {
                        TTest::Pooled => TTestKind::Pooled,
                        TTest::Welch => TTestKind::Welch,
                    },
                },
                threads,
            };
            cmd_probe(&checkpoint, &features, &alignments, &opts, &out)?;
            println!("wrote PSI tables to {}", out.display());
        }
        Cmd::Quality { posteriors, manifest, split, out } => {
            let prior = match (manifest, split) {
                (Some(manifest), Some(split)) => PriorSource::TrainSplit { manifest, split },
                _ => PriorSource::DumpLabels,
            };
            let q = cmd_quality(&posteriors, &prior, &out)?;
            println!("q_model={:.4}\tq_argmax={:.4}", q.model.quality.q, q.argmax_joint.q);
        }
        Cmd::Report { runs } => {
            let r = cmd_report(&runs)?;
            println!("aggregated {} runs", r.runs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
