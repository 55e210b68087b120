//! Synthetic keyword corpus rendered directly in the log-Mel domain.
//!
//! Each class owns a smooth Gabor-like time-frequency template. An utterance is
//! a carrier (spectral tilt, smoothed noise, shared distractor templates) with
//! one speaker-perturbed copy of its class template placed at a random onset.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusManifest, UtteranceRecord, VisualVocabulary};
use crate::error::{Error, Result};
use crate::features::{pad_or_clip, FeatureParams, FeatureStore, LogMelSpectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub n_classes: usize,
    pub n_utterances: usize,
    pub carrier_noise_level: f64,
    pub keyword_duration_s: f64,
    pub utterance_duration_range_s: (f64, f64),
    pub n_speakers: usize,
    pub speaker_shift_strength: f64,
    pub attention_rate: f64,
    pub seed: u64,
    /// Randomize the keyword onset within the utterance.
    #[serde(default = "default_true")]
    pub temporal_jitter: bool,
    /// Size of the shared distractor pool; `None` means one per class.
    #[serde(default)]
    pub n_distractors: Option<usize>,
    /// Pad or clip every utterance to this many frames; `None` keeps natural lengths.
    #[serde(default)]
    pub input_frames: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            n_classes: 12,
            n_utterances: 1200,
            carrier_noise_level: 1.0,
            keyword_duration_s: 0.3,
            utterance_duration_range_s: (0.5, 0.9),
            n_speakers: 3,
            speaker_shift_strength: 1.0,
            attention_rate: 0.65,
            seed: 0,
            temporal_jitter: true,
            n_distractors: None,
            input_frames: None,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.n_classes < 2 {
            return bad(format!("n_classes {} < 2", self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.attention_rate) {
            return bad(format!("attention_rate {} not in [0, 1]", self.attention_rate));
        }
        let (lo, hi) = self.utterance_duration_range_s;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("duration range ({lo}, {hi}) must be positive and ordered"));
        }
        if self.n_speakers == 0 {
            return bad("n_speakers must be >= 1".into());
        }
        if !(self.keyword_duration_s > 0.0) {
            return bad("keyword_duration_s must be positive".into());
        }
        if self.keyword_duration_s > lo {
            return bad(format!(
                "keyword duration {} s exceeds minimum utterance duration {lo} s",
                self.keyword_duration_s
            ));
        }
        if !(self.carrier_noise_level >= 0.0) || !(self.speaker_shift_strength >= 0.0) {
            return bad("noise level and speaker shift must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub store: FeatureStore,
    /// Keyword onset frame per utterance id.
    pub keyword_onsets: BTreeMap<String, usize>,
    pub keyword_frames: usize,
}

#[derive(Debug, Clone)]
struct Blob {
    t0: f64,
    f0: f64,
    sigma_t: f64,
    sigma_f: f64,
    omega_t: f64,
    phase: f64,
    amp: f64,
}

/// Analytic template on normalized time `u` in [0, 1] and band coordinate `f`.
#[derive(Debug, Clone)]
struct Template(Vec<Blob>);

impl Template {
    fn random(rng: &mut ChaCha8Rng, n_bands: usize) -> Self {
        let top = n_bands as f64 - 1.0;
        let n = rng.random_range(2..=3);
        Template(
            (0..n)
                .map(|_| Blob {
                    t0: rng.random_range(0.15..0.85),
                    f0: rng.random_range(0.1 * top..0.9 * top),
                    sigma_t: rng.random_range(0.08..0.2),
                    sigma_f: rng.random_range(0.06..0.14) * n_bands as f64,
                    omega_t: rng.random_range(0.0..2.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(1.5..3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
                })
                .collect(),
        )
    }

    fn eval(&self, u: f64, f: f64) -> f64 {
        self.0
            .iter()
            .map(|b| {
                let dt = (u - b.t0) / b.sigma_t;
                let df = (f - b.f0) / b.sigma_f;
                b.amp * (-0.5 * (dt * dt + df * df)).exp() * (2.0 * PI * b.omega_t * (u - b.t0) + b.phase).cos()
            })
            .sum()
    }

    /// Renders `frames x n_bands`, with the frequency axis shifted by `shift`
    /// bands and an affine gain/offset applied.
    fn render(&self, frames: usize, n_bands: usize, shift: f64, gain: f64, offset: f64) -> Array2<f64> {
        Array2::from_shape_fn((frames, n_bands), |(t, f)| {
            let u = (t as f64 + 0.5) / frames as f64;
            gain * self.eval(u, f as f64 - shift) + offset
        })
    }
}

struct Speaker {
    shift: f64,
    gain: f64,
    offset: f64,
}

/// Renders the corpus. Labels are the embedded classes; `attended` is drawn
/// Bernoulli(`attention_rate`). Everything is a pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let params = FeatureParams::default();
    let n_bands = params.n_mel_bands;
    let frame_s = params.hop_ms / 1000.0;
    let kw_frames = ((spec.keyword_duration_s / frame_s).round() as usize).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Template> = (0..spec.n_classes).map(|_| Template::random(&mut rng, n_bands)).collect();
    let n_distractors = spec.n_distractors.unwrap_or(spec.n_classes);
    let distractors: Vec<Template> = (0..n_distractors).map(|_| Template::random(&mut rng, n_bands)).collect();
    let speakers: Vec<Speaker> = (0..spec.n_speakers)
        .map(|_| {
            let s = spec.speaker_shift_strength;
            Speaker {
                shift: s * rng.random_range(-1.0..1.0),
                gain: 1.0 + 0.25 * s * rng.random_range(-1.0..1.0),
                offset: 0.5 * s * rng.random_range(-1.0..1.0),
            }
        })
        .collect();
    let rendered: Vec<Vec<Array2<f64>>> = templates
        .iter()
        .map(|tpl| {
            speakers
                .iter()
                .map(|sp| tpl.render(kw_frames, n_bands, sp.shift, sp.gain, sp.offset))
                .collect()
        })
        .collect();

    let vocab = VisualVocabulary::new((0..spec.n_classes).map(|c| format!("word{c:02}")))?;
    let mut store = FeatureStore::new(params.clone());
    let mut records = Vec::with_capacity(spec.n_utterances);
    let mut onsets = BTreeMap::new();
    let (lo, hi) = spec.utterance_duration_range_s;
    let width = (spec.n_utterances.max(1) - 1).to_string().len();

    for i in 0..spec.n_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let label = i % spec.n_classes;
        let speaker = rng.random_range(0..spec.n_speakers);
        let attended = rng.random_bool(spec.attention_rate);
        let dur = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let frames = ((dur / frame_s).round() as usize).max(kw_frames);

        let mut m = Array2::from_shape_fn((frames, n_bands), |(_, f)| -0.05 * f as f64);
        let level = spec.carrier_noise_level;
        if level > 0.0 {
            let white = Array2::from_shape_fn((frames, n_bands), |_| rng.sample::<f64, _>(StandardNormal));
            // 3x3 box blur; the factor 3 restores roughly unit variance
            for t in 0..frames {
                for f in 0..n_bands {
                    let mut acc = 0.0;
                    for dt in t.saturating_sub(1)..(t + 2).min(frames) {
                        for df in f.saturating_sub(1)..(f + 2).min(n_bands) {
                            acc += white[[dt, df]];
                        }
                    }
                    m[[t, f]] += level * acc / 3.0;
                }
            }
            let n_dis = if distractors.is_empty() { 0 } else { rng.random_range(1..=2) };
            for _ in 0..n_dis {
                let d = &distractors[rng.random_range(0..distractors.len())];
                let sp = &speakers[speaker];
                let dl = kw_frames.min(frames);
                let at = rng.random_range(0..=frames - dl);
                let pattern = d.render(dl, n_bands, sp.shift, sp.gain, 0.0);
                for t in 0..dl {
                    for f in 0..n_bands {
                        m[[at + t, f]] += level * pattern[[t, f]];
                    }
                }
            }
        }
        let onset = if spec.temporal_jitter { rng.random_range(0..=frames - kw_frames) } else { 0 };
        let kw = &rendered[label][speaker];
        for t in 0..kw_frames {
            for f in 0..n_bands {
                m[[onset + t, f]] += kw[[t, f]];
            }
        }

        let id = format!("utt{i:0width$}");
        let mut spec_out = LogMelSpectrogram::from_values(m.mapv(|v| v as f32), params.clone())?;
        if let Some(n) = spec.input_frames {
            spec_out = pad_or_clip(&spec_out, n)?;
        }
        store.insert(id.clone(), spec_out)?;
        onsets.insert(id.clone(), onset);
        records.push(UtteranceRecord {
            utterance_id: id.clone(),
            audio_ref: format!("features:{id}"),
            label,
            attended,
            speaker_id: format!("spk{speaker}"),
            duration_s: frames as f64 * frame_s,
        });
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "synthetic".to_string());
    metadata.insert("seed".to_string(), spec.seed.to_string());
    metadata.insert("keyword_frames".to_string(), kw_frames.to_string());
    let manifest = CorpusManifest::new(vocab, records, metadata)?;
    Ok(SyntheticCorpus { manifest, store, keyword_onsets: onsets, keyword_frames: kw_frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec { n_classes: 4, n_utterances: 40, ..Default::default() }
    }

    #[test]
    fn attention_rate_matches_noise_regime() {
        let spec = SyntheticCorpusSpec { n_classes: 12, n_utterances: 1200, attention_rate: 0.65, ..Default::default() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(c.manifest.len(), 1200);
        assert_eq!(c.store.len(), 1200);
        let unattended = c.manifest.records.iter().filter(|r| !r.attended).count();
        // binomial(1200, 0.35): mean 420, sd 16.5, 99% band +-42.6
        assert!((unattended as f64 - 420.0).abs() < 42.6, "{unattended}");
        assert_eq!(c.manifest.class_counts(), vec![100; 12]);
    }

    #[test]
    fn noiseless_single_speaker_keywords_identical() {
        let spec = SyntheticCorpusSpec { carrier_noise_level: 0.0, n_speakers: 1, temporal_jitter: false, ..small() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let k = c.keyword_frames;
        for class in 0..4 {
            let ids: Vec<&UtteranceRecord> = c.manifest.records.iter().filter(|r| r.label == class).collect();
            let first = c.store.get(&ids[0].utterance_id).unwrap().values().slice(s![..k, ..]).to_owned();
            for r in &ids[1..] {
                assert_eq!(c.keyword_onsets[&r.utterance_id], 0);
                let m = c.store.get(&r.utterance_id).unwrap();
                assert_eq!(m.values().slice(s![..k, ..]), first);
            }
        }
        // with jitter: identical up to placement
        let spec = SyntheticCorpusSpec { temporal_jitter: true, ..spec };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let windows: Vec<Array2<f32>> = c
            .manifest
            .records
            .iter()
            .filter(|r| r.label == 1)
            .map(|r| {
                let on = c.keyword_onsets[&r.utterance_id];
                c.store.get(&r.utterance_id).unwrap().values().slice(s![on..on + k, ..]).to_owned()
            })
            .collect();
        assert!(windows.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_eq!(a.manifest, b.manifest);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.store.checksum(), c.store.checksum());
    }

    #[test]
    fn keyword_longer_than_utterance_rejected() {
        let spec = SyntheticCorpusSpec { keyword_duration_s: 0.6, ..small() };
        assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::Config(_))));
        let spec = SyntheticCorpusSpec { n_classes: 1, ..small() };
        assert!(generate_synthetic_corpus(&spec).is_err());
        let spec = SyntheticCorpusSpec { attention_rate: 1.5, ..small() };
        assert!(generate_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn attended_rate_converges() {
        for (n, rate) in [(500usize, 0.3f64), (3000, 0.8)] {
            let spec = SyntheticCorpusSpec { n_utterances: n, attention_rate: rate, carrier_noise_level: 0.0, ..small() };
            let c = generate_synthetic_corpus(&spec).unwrap();
            let k = c.manifest.records.iter().filter(|r| r.attended).count() as f64;
            let sd = (n as f64 * rate * (1.0 - rate)).sqrt();
            assert!((k - n as f64 * rate).abs() < 2.576 * sd);
        }
    }
}
