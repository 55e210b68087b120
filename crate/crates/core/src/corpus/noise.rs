use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CorpusManifest;

/// Relabels every non-attended record with a class drawn uniformly from the
/// whole vocabulary (the original class included). Attended records and all
/// other fields are left untouched.
pub fn apply_attention_noise(manifest: &CorpusManifest, seed: u64) -> CorpusManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = manifest.vocabulary.len();
    let mut out = manifest.clone();
    for r in out.records.iter_mut().filter(|r| !r.attended) {
        r.label = rng.random_range(0..n_classes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{UtteranceRecord, VisualVocabulary};
    use std::collections::BTreeMap;

    fn manifest(n: usize, n_classes: usize, attended: impl Fn(usize) -> bool) -> CorpusManifest {
        let vocab = VisualVocabulary::new((0..n_classes).map(|c| format!("c{c}"))).unwrap();
        let records = (0..n)
            .map(|i| UtteranceRecord {
                utterance_id: format!("u{i}"),
                audio_ref: format!("u{i}.wav"),
                label: i % n_classes,
                attended: attended(i),
                speaker_id: "s".into(),
                duration_s: 1.0,
            })
            .collect();
        CorpusManifest::new(vocab, records, BTreeMap::new()).unwrap()
    }

    #[test]
    fn all_attended_is_noop() {
        let m = manifest(50, 5, |_| true);
        assert_eq!(apply_attention_noise(&m, 3), m);
    }

    #[test]
    fn only_unattended_records_change() {
        // 35 of every 100 records unattended
        let m = manifest(1000, 60, |i| i % 100 >= 35);
        let noisy = apply_attention_noise(&m, 11);
        let mut changed = 0;
        for (a, b) in m.records.iter().zip(&noisy.records) {
            assert_eq!(a.utterance_id, b.utterance_id);
            assert_eq!(a.attended, b.attended);
            assert_eq!(a.speaker_id, b.speaker_id);
            if a.attended {
                assert_eq!(a.label, b.label);
            } else if a.label != b.label {
                changed += 1;
            }
        }
        // 350 resampled, each keeps its label with probability 1/60
        assert!(changed > 320 && changed <= 350, "{changed}");
    }

    #[test]
    fn seeded_determinism() {
        let m = manifest(200, 12, |i| i % 3 != 0);
        let a = apply_attention_noise(&m, 5);
        let b = apply_attention_noise(&m, 5);
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = apply_attention_noise(&m, 6);
        assert_ne!(a.labels(), c.labels());
        // input untouched
        assert_eq!(m.labels(), (0..200).map(|i| i % 12).collect::<Vec<_>>());
    }

    #[test]
    fn relabeling_is_uniform_over_all_classes() {
        let m = manifest(6000, 3, |_| false);
        let noisy = apply_attention_noise(&m, 1);
        let counts = noisy.class_counts();
        // chi-square with 2 dof, 99.9% critical value 13.8
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2000.0).powi(2) / 2000.0).sum();
        assert!(chi2 < 13.8, "{counts:?}");
        let kept = m.records.iter().zip(&noisy.records).filter(|(a, b)| a.label == b.label).count();
        assert!((kept as f64 / 6000.0 - 1.0 / 3.0).abs() < 0.03);
    }
}
