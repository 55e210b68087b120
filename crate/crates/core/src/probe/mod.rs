//! Phone selectivity of hidden nodes.

mod alignment;
mod psi;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{LayerId, Model};
use crate::parallel::{self, Parallelism};
use crate::real::Real;

pub use alignment::{load_alignments, parse_alignments, AlignmentSet, PhoneAlignment, PhoneSegment};
pub use psi::{compute_psi, layer_summary, summary_tsv, t_test, LayerSummary, PsiConfig, PsiReport, TTestKind, TTestResult};

/// How a conv channel's `[freq]` slice is reduced to one scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqReduce {
    #[default]
    Mean,
    Max,
}

/// Samples of one layer, indexed `[node][phone]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSamples {
    pub layer: LayerId,
    pub samples: Vec<Vec<Vec<f64>>>,
}

impl LayerSamples {
    pub fn n_nodes(&self) -> usize {
        self.samples.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.samples.first().map(|n| n.iter().map(Vec::len).collect()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSampleSet {
    pub phones: Vec<String>,
    pub layers: Vec<LayerSamples>,
    /// Segments whose midpoint fell outside the valid input window.
    pub skipped_segments: usize,
    pub used_segments: usize,
}

/// Input frame index of a segment midpoint.
pub fn midpoint_frame(seg: &PhoneSegment, hop_ms: f64) -> usize {
    (seg.midpoint_s() * 1000.0 / hop_ms).round().max(0.0) as usize
}

/// Captures each layer's node activations at the middle frame of every
/// annotated phone segment.
pub fn midframe_activations<T: Real>(
    model: &Model<T>,
    store: &FeatureStore,
    alignments: &AlignmentSet,
    layers: &[LayerId],
    reduce: FreqReduce,
    mode: Parallelism,
) -> Result<ActivationSampleSet> {
    let available = model.layers();
    if let Some(l) = layers.iter().find(|l| !available.contains(l)) {
        return Err(Error::InvalidArgument(format!("layer {l} does not exist in this model")));
    }
    let phone_idx: BTreeMap<&str, usize> = alignments.phones.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let n_phones = alignments.phones.len();
    let hop_ms = store.params().hop_ms;

    let per_utt = parallel::map(mode, &alignments.alignments, |_, al| -> Result<_> {
        let spec = store.require(&al.utterance_id)?;
        let out = model.forward_one(spec, layers)?;
        let limit = spec.n_valid().min(model.config().input_frames);
        let mut rows = Vec::new();
        let mut skipped = 0usize;
        for seg in &al.segments {
            let p = *phone_idx
                .get(seg.phone.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("phone {:?} not in the phone set", seg.phone)))?;
            let frame = midpoint_frame(seg, hop_ms);
            if frame >= limit {
                skipped += 1;
                continue;
            }
            let values: Vec<Vec<f64>> = layers
                .iter()
                .map(|l| {
                    let act = &out.activations[l];
                    let t = (frame / act.stride).min(act.data.dim().0 - 1);
                    let slice = act.data.index_axis(ndarray::Axis(0), t);
                    slice
                        .columns()
                        .into_iter()
                        .map(|col| match reduce {
                            FreqReduce::Mean => col.iter().map(|&v| v as f64).sum::<f64>() / col.len() as f64,
                            FreqReduce::Max => col.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)),
                        })
                        .collect()
                })
                .collect();
            rows.push((p, values));
        }
        Ok((rows, skipped))
    });

    let mut set = ActivationSampleSet {
        phones: alignments.phones.clone(),
        layers: Vec::with_capacity(layers.len()),
        skipped_segments: 0,
        used_segments: 0,
    };
    for &layer in layers {
        set.layers.push(LayerSamples { layer, samples: Vec::new() });
    }
    for r in per_utt {
        let (rows, skipped) = r?;
        set.skipped_segments += skipped;
        for (p, values) in rows {
            set.used_segments += 1;
            for (ls, v) in set.layers.iter_mut().zip(values) {
                if ls.samples.is_empty() {
                    ls.samples = vec![vec![Vec::new(); n_phones]; v.len()];
                }
                for (node, x) in v.into_iter().enumerate() {
                    ls.samples[node][p].push(x);
                }
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureParams, LogMelSpectrogram};
    use crate::model::tests::tiny_config;
    use crate::model::Variant;
    use ndarray::Array2;
    use std::path::Path;

    fn seg(a: f64, b: f64) -> PhoneSegment {
        PhoneSegment { phone: "aa".into(), start_s: a, end_s: b }
    }

    #[test]
    fn midpoint_arithmetic() {
        assert_eq!(midpoint_frame(&seg(0.10, 0.20), 10.0), 15);
        assert_eq!(midpoint_frame(&seg(0.10, 0.20), 10.0) / 4, 3);
    }

    fn setup() -> (Model<f32>, FeatureStore) {
        let cfg = tiny_config(Variant::Full);
        let params = FeatureParams { n_mel_bands: 8, ..Default::default() };
        let mut store = FeatureStore::new(params.clone());
        let v = Array2::from_shape_fn((32, 8), |(t, f)| ((t * 7 + f * 3) % 11) as f32 * 0.1);
        store.insert("u1", LogMelSpectrogram::new(v, 20, params).unwrap()).unwrap();
        (Model::build(cfg, 1).unwrap(), store)
    }

    #[test]
    fn samples_land_on_layer_grids() {
        let (model, store) = setup();
        let text = "u1 aa 0.10 0.16\nu1 b 0.16 0.20\nu1 aa 0.25 0.40\n";
        let al = parse_alignments(text, Path::new("x"), None).unwrap();
        let layers = [LayerId::Conv(1), LayerId::Gru, LayerId::Dense];
        let s = midframe_activations(&model, &store, &al, &layers, FreqReduce::Mean, Parallelism::Sequential).unwrap();
        // third midpoint (frame 33) is past the 20 valid frames
        assert_eq!((s.used_segments, s.skipped_segments), (2, 1));
        assert_eq!(s.layers[0].n_nodes(), 4);
        assert_eq!(s.layers[2].n_nodes(), 6);
        assert_eq!(s.layers[1].counts(), vec![1, 1]);

        let spec = store.get("u1").unwrap();
        let out = model.forward_one(spec, &layers).unwrap();
        let dense = &out.activations[&LayerId::Dense].data;
        assert_eq!(s.layers[2].samples[5][0][0], dense[[3, 0, 5]] as f64);
        let conv = &out.activations[&LayerId::Conv(1)].data;
        let mean: f64 = (0..8).map(|f| conv[[13, f, 2]] as f64).sum::<f64>() / 8.0;
        assert!((s.layers[0].samples[2][0][0] - mean).abs() < 1e-12);
        let mx = midframe_activations(&model, &store, &al, &layers[..1], FreqReduce::Max, Parallelism::Sequential).unwrap();
        let max = (0..8).map(|f| conv[[13, f, 2]] as f64).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(mx.layers[0].samples[2][0][0], max);
    }

    #[test]
    fn empty_alignments_give_empty_set() {
        let (model, store) = setup();
        let al = AlignmentSet { phones: vec!["aa".into()], alignments: vec![] };
        let s = midframe_activations(&model, &store, &al, &[LayerId::Gru], FreqReduce::Mean, Parallelism::Sequential).unwrap();
        assert_eq!(s.used_segments, 0);
        assert!(s.layers[0].samples.is_empty());
    }

    #[test]
    fn unknown_layer_and_utterance() {
        let (model, store) = setup();
        let al = AlignmentSet { phones: vec!["aa".into()], alignments: vec![] };
        assert!(midframe_activations(&model, &store, &al, &[LayerId::Conv(9)], FreqReduce::Mean, Parallelism::Sequential).is_err());
        let al = parse_alignments("zz aa 0.0 0.1\n", Path::new("x"), None).unwrap();
        assert!(matches!(
            midframe_activations(&model, &store, &al, &[LayerId::Gru], FreqReduce::Mean, Parallelism::Sequential),
            Err(Error::MissingFeatures(_))
        ));
    }
}
