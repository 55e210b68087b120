use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wordground::evaluation::DetectionConfig;
use wordground::features::FeatureParams;
use wordground::model::{ModelConfig, Variant};
use wordground::training::{ExperimentSpec, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub noise_seed: Option<u64>,
    pub shuffle_labels_seed: Option<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            variants: vec![Variant::Full],
            seeds: vec![1],
            train_fraction: 0.8,
            val_fraction: 0.2,
            split_seed: 0,
            noise_seed: None,
            shuffle_labels_seed: None,
        }
    }
}

/// Everything `train` needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub features: FeatureParams,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl RunConfig {
    /// Parses `text`; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("invalid run config")?;
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.features, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks every section and that the input files exist.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.features.validate()?;
        self.detection.validate()?;
        if self.experiment.variants.is_empty() || self.experiment.seeds.is_empty() {
            bail!("experiment needs at least one variant and one seed");
        }
        if self.model.input_bands != self.features.n_mel_bands {
            bail!(
                "model.input_bands {} differs from features.n_mel_bands {}",
                self.model.input_bands,
                self.features.n_mel_bands
            );
        }
        if (self.model.frame_hop_ms - self.features.hop_ms).abs() > 1e-9 {
            bail!("model.frame_hop_ms differs from features.hop_ms");
        }
        for p in [&self.paths.manifest, &self.paths.features] {
            if !p.exists() {
                bail!("path does not exist: {}", p.display());
            }
        }
        Ok(())
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            detection: self.detection.clone(),
            train_fraction: self.experiment.train_fraction,
            val_fraction: self.experiment.val_fraction,
            split_seed: self.experiment.split_seed,
            noise_seed: self.experiment.noise_seed,
            shuffle_labels_seed: self.experiment.shuffle_labels_seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[paths]\nmanifest = \"m.jsonl\"\nfeatures = \"f.wgfs\"\noutput = \"out\"\n";

    #[test]
    fn defaults_and_relative_paths() {
        let c = RunConfig::parse(MIN, Path::new("/data")).unwrap();
        assert_eq!(c.paths.manifest, PathBuf::from("/data/m.jsonl"));
        assert_eq!(c.optimizer, OptimizerConfig::default());
        assert_eq!(c.experiment.variants, vec![Variant::Full]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(&format!("{MIN}[model]\nconv_chanels = 3\n"), Path::new(".")).is_err());
        assert!(RunConfig::parse(&format!("{MIN}bogus = 1\n"), Path::new(".")).is_err());
    }

    #[test]
    fn variant_names_parse() {
        let c = RunConfig::parse(&format!("{MIN}[experiment]\nvariants = [\"full\", \"no-AE\", \"AE-pred\"]\nseeds = [1, 2]\n"), Path::new(".")).unwrap();
        assert_eq!(c.experiment.variants, vec![Variant::Full, Variant::NoAe, Variant::AePred]);
    }

    #[test]
    fn roundtrip() {
        let c = RunConfig::parse(MIN, Path::new("/d")).unwrap();
        let again = RunConfig::parse(&c.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn missing_inputs_fail_validation() {
        let c = RunConfig::parse(MIN, Path::new("/nonexistent")).unwrap();
        assert!(c.validate().is_err());
    }
}
