//! Convolutional-recurrent network: convolution stack, Mel-axis pooling, GRU,
//! temporal bottleneck, time-distributed ReLU layer, a softmax visual
//! prediction head max-pooled over time, and an autoencoding decoder.

mod checkpoint;
pub(crate) mod layers;
pub(crate) mod network;
mod params;

pub use checkpoint::{CheckpointMeta, CHECKPOINT_VERSION};
pub use params::{Decoder, Params, TensorMut, TensorRef};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LogMelSpectrogram;
use crate::parallel::{self, Parallelism};
use crate::real::Real;
use network::{Heads, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-AE")]
    NoAe,
    #[serde(rename = "AE-noBN")]
    AeNoBn,
    #[serde(rename = "AE-pred")]
    AePred,
    #[serde(rename = "AE-pretrain")]
    AePretrain,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoAe, Variant::AeNoBn, Variant::AePred, Variant::AePretrain];

    pub fn has_decoder(self) -> bool {
        self != Variant::NoAe
    }

    pub fn has_bottleneck(self) -> bool {
        self != Variant::AeNoBn
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAe => "no-AE",
            Variant::AeNoBn => "AE-noBN",
            Variant::AePred => "AE-pred",
            Variant::AePretrain => "AE-pretrain",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_conv_layers: usize,
    pub conv_channels: usize,
    /// (time, frequency) kernel size.
    pub conv_kernel: (usize, usize),
    pub recurrent_units: usize,
    pub bottleneck_window: usize,
    pub bottleneck_stride: usize,
    pub dense_units: usize,
    pub d_visual: usize,
    pub input_frames: usize,
    pub input_bands: usize,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub variant: Variant,
    /// Look-ahead of the AE-pred reconstruction target.
    pub pred_shift_ms: f64,
    /// Frame shift of the input features.
    pub frame_hop_ms: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_conv_layers: 5,
            conv_channels: 64,
            conv_kernel: (5, 5),
            recurrent_units: 256,
            bottleneck_window: 8,
            bottleneck_stride: 4,
            dense_units: 1048,
            d_visual: 60,
            input_frames: 512,
            input_bands: 24,
            dropout_rate: 0.1,
            l2_lambda: 0.01,
            variant: Variant::Full,
            pred_shift_ms: 250.0,
            frame_hop_ms: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        let sizes = [
            ("n_conv_layers", self.n_conv_layers),
            ("conv_channels", self.conv_channels),
            ("conv_kernel.time", self.conv_kernel.0),
            ("conv_kernel.freq", self.conv_kernel.1),
            ("recurrent_units", self.recurrent_units),
            ("bottleneck_window", self.bottleneck_window),
            ("bottleneck_stride", self.bottleneck_stride),
            ("dense_units", self.dense_units),
            ("input_frames", self.input_frames),
            ("input_bands", self.input_bands),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_visual < 2 {
            return bad(format!("d_visual {} < 2", self.d_visual));
        }
        if self.input_frames % self.bottleneck_stride != 0 {
            return bad(format!(
                "bottleneck_stride {} does not divide input_frames {}",
                self.bottleneck_stride, self.input_frames
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be nonnegative".into());
        }
        if !(self.frame_hop_ms > 0.0) || !(self.pred_shift_ms >= 0.0) {
            return bad("frame_hop_ms must be positive and pred_shift_ms nonnegative".into());
        }
        Ok(())
    }

    /// Input frames per bottleneck frame (1 without the bottleneck).
    pub fn temporal_stride(&self) -> usize {
        if self.variant.has_bottleneck() {
            self.bottleneck_stride
        } else {
            1
        }
    }

    /// Number of frame-wise posterior rows.
    pub fn bottleneck_frames(&self) -> usize {
        self.input_frames / self.temporal_stride()
    }

    /// Frames the AE target runs ahead of the input (AE-pred only).
    pub fn ae_shift_frames(&self) -> usize {
        if self.variant == Variant::AePred {
            (self.pred_shift_ms / self.frame_hop_ms).round() as usize
        } else {
            0
        }
    }
}

/// Named hidden layers, encoder to decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    /// 1-based encoder convolution.
    Conv(usize),
    MelPool,
    Gru,
    Bottleneck,
    Dense,
    DecPre,
    /// 1-based decoder convolution.
    DecConv(usize),
    DecPost,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Conv(i) => write!(f, "conv{i}"),
            LayerId::MelPool => f.write_str("melpool"),
            LayerId::Gru => f.write_str("gru"),
            LayerId::Bottleneck => f.write_str("bottleneck"),
            LayerId::Dense => f.write_str("dense"),
            LayerId::DecPre => f.write_str("dec_pre"),
            LayerId::DecConv(i) => write!(f, "dec_conv{i}"),
            LayerId::DecPost => f.write_str("dec_post"),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for LayerId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| rest.parse::<usize>().ok().filter(|&i| i >= 1);
        let id = match s {
            "melpool" => Some(LayerId::MelPool),
            "gru" => Some(LayerId::Gru),
            "bottleneck" => Some(LayerId::Bottleneck),
            "dense" => Some(LayerId::Dense),
            "dec_pre" => Some(LayerId::DecPre),
            "dec_post" => Some(LayerId::DecPost),
            _ => {
                if let Some(rest) = s.strip_prefix("dec_conv") {
                    num(rest).map(LayerId::DecConv)
                } else if let Some(rest) = s.strip_prefix("conv") {
                    num(rest).map(LayerId::Conv)
                } else {
                    None
                }
            }
        };
        id.ok_or_else(|| Error::InvalidArgument(format!("unknown layer {s:?}")))
    }
}

/// Captured activations of one layer: `[steps, freq, nodes]`, where each step
/// covers `stride` input frames. Non-convolutional layers have `freq == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub stride: usize,
    pub data: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    /// `[bottleneck_frames, d_visual]`, rows are probability vectors.
    pub frame_posteriors: Array2<f64>,
    /// Column-wise max over the valid rows of `frame_posteriors`.
    pub utterance_posterior: Array1<f64>,
    /// Rows of `frame_posteriors` that overlap real input frames.
    pub valid_frames: usize,
    /// `[input_frames, input_bands]`; absent for the no-AE variant.
    pub reconstruction: Option<Array2<f64>>,
    pub activations: BTreeMap<LayerId, Activation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    seed: u64,
    pub params: Params<T>,
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Model { config, seed, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, seed: u64, params: Params<T>) -> Self {
        Model { config, seed, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), seed: self.seed, params: self.params.cast() }
    }

    /// Errors unless the visual head matches a vocabulary of `n_classes`.
    pub fn check_vocabulary(&self, n_classes: usize) -> Result<()> {
        if self.config.d_visual != n_classes {
            return Err(Error::ConfigMismatch(format!(
                "model predicts {} classes, vocabulary has {n_classes}",
                self.config.d_visual
            )));
        }
        Ok(())
    }

    /// Layers present in this variant, encoder to decoder.
    pub fn layers(&self) -> Vec<LayerId> {
        let n = self.config.n_conv_layers;
        let mut out: Vec<LayerId> = (1..=n).map(LayerId::Conv).collect();
        out.push(LayerId::MelPool);
        out.push(LayerId::Gru);
        if self.config.variant.has_bottleneck() {
            out.push(LayerId::Bottleneck);
        }
        out.push(LayerId::Dense);
        if self.config.variant.has_decoder() {
            out.push(LayerId::DecPre);
            out.extend((1..=n).map(LayerId::DecConv));
            out.push(LayerId::DecPost);
        }
        out
    }

    /// Converts a spectrogram to the network input, checking geometry.
    pub fn prepare_input(&self, spec: &LogMelSpectrogram) -> Result<(Array2<T>, usize)> {
        let c = &self.config;
        if spec.n_frames() != c.input_frames || spec.n_bands() != c.input_bands {
            return Err(Error::Shape(format!(
                "input is {}x{}, model expects {}x{}",
                spec.n_frames(),
                spec.n_bands(),
                c.input_frames,
                c.input_bands
            )));
        }
        if spec.n_valid() == 0 {
            return Err(Error::Shape("input has no valid frames".into()));
        }
        Ok((spec.values().mapv(|v| T::of(v as f64)), spec.n_valid()))
    }

    /// Reconstruction target and its number of valid rows for input `x`.
    pub fn ae_target(&self, x: &Array2<T>, n_valid: usize) -> (Array2<T>, usize) {
        let shift = self.config.ae_shift_frames();
        if shift == 0 {
            return (x.clone(), n_valid);
        }
        let (nt, nf) = x.dim();
        let mut y = Array2::zeros((nt, nf));
        if shift < nt {
            y.slice_mut(s![..nt - shift, ..]).assign(&x.slice(s![shift.., ..]));
        }
        (y, n_valid.saturating_sub(shift))
    }

    pub(crate) fn trace(&self, x: &Array2<T>, n_valid: usize, dropout_seed: Option<u64>, heads: Heads) -> Trace<T> {
        network::forward(&self.params, &self.config, x.view(), n_valid, dropout_seed, heads)
    }

    /// Inference on one utterance.
    pub fn forward_one(&self, spec: &LogMelSpectrogram, capture: &[LayerId]) -> Result<ForwardOutputs> {
        let (x, n_valid) = self.prepare_input(spec)?;
        for layer in capture {
            if !self.layers().contains(layer) {
                return Err(Error::InvalidArgument(format!("layer {layer} not in this model")));
            }
        }
        let heads = Heads { vp: true, ae: self.config.variant.has_decoder() };
        let tr = self.trace(&x, n_valid, None, heads);
        Ok(self.outputs(tr, capture))
    }

    /// Inference on a batch; items are independent.
    pub fn forward(&self, batch: &[LogMelSpectrogram], capture: &[LayerId], mode: Parallelism) -> Result<Vec<ForwardOutputs>> {
        parallel::map(mode, batch, |_, spec| self.forward_one(spec, capture)).into_iter().collect()
    }

    fn outputs(&self, tr: Trace<T>, capture: &[LayerId]) -> ForwardOutputs {
        let to64 = |a: &Array2<T>| a.mapv(|v| v.as_f64());
        let as3 = |a: &Array2<T>| {
            let (n, k) = a.dim();
            a.mapv(|v| v.as_f32()).into_shape_with_order((n, 1, k)).expect("activation shape")
        };
        let stride = self.config.temporal_stride();
        let mut activations = BTreeMap::new();
        for &layer in capture {
            let act = match layer {
                LayerId::Conv(i) => Activation { stride: 1, data: tr.enc_out[i - 1].mapv(|v| v.as_f32()) },
                LayerId::MelPool => Activation { stride: 1, data: as3(&tr.mel) },
                LayerId::Gru => Activation { stride: 1, data: as3(&tr.gru_out) },
                LayerId::Bottleneck => Activation { stride, data: as3(&tr.bn) },
                LayerId::Dense => Activation { stride, data: as3(&tr.dense_out) },
                LayerId::DecPre => {
                    let d = tr.dec.as_ref().expect("decoder present");
                    Activation { stride, data: d.pre_out.mapv(|v| v.as_f32()) }
                }
                LayerId::DecConv(i) => {
                    let d = tr.dec.as_ref().expect("decoder present");
                    Activation { stride: 1, data: d.conv_out[i - 1].mapv(|v| v.as_f32()) }
                }
                LayerId::DecPost => {
                    let d = tr.dec.as_ref().expect("decoder present");
                    let (n, k) = d.recon.dim();
                    let data = d.recon.mapv(|v| v.as_f32()).into_shape_with_order((n, k, 1)).expect("recon shape");
                    Activation { stride: 1, data }
                }
            };
            activations.insert(layer, act);
        }
        ForwardOutputs {
            frame_posteriors: to64(tr.probs.as_ref().expect("vp head evaluated")),
            utterance_posterior: tr.utt.as_ref().expect("vp head evaluated").mapv(|v| v.as_f64()),
            valid_frames: tr.n_valid_bn,
            reconstruction: tr.dec.as_ref().map(|d| to64(&d.recon)),
            activations,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::FeatureParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_conv_layers: 2,
            conv_channels: 4,
            conv_kernel: (3, 3),
            recurrent_units: 4,
            dense_units: 6,
            d_visual: 3,
            input_frames: 32,
            input_bands: 8,
            variant,
            pred_shift_ms: 50.0,
            ..Default::default()
        }
    }

    fn random_spec(frames: usize, bands: usize, n_valid: usize, seed: u64) -> LogMelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = FeatureParams { n_mel_bands: bands, ..Default::default() };
        let v = Array2::from_shape_simple_fn((frames, bands), || rng.random_range(-2.0f32..2.0));
        LogMelSpectrogram::new(v, n_valid, p).unwrap()
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&j).unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn layer_ids_roundtrip() {
        let m = Model::<f32>::build(tiny_config(Variant::Full), 0).unwrap();
        for l in m.layers() {
            assert_eq!(l.to_string().parse::<LayerId>().unwrap(), l);
        }
        assert!("conv0".parse::<LayerId>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(Variant::Full);
        c.bottleneck_stride = 5;
        assert!(Model::<f32>::build(c, 0).is_err());
        let mut c = tiny_config(Variant::Full);
        c.conv_channels = 0;
        assert!(Model::<f32>::build(c, 0).is_err());
    }

    #[test]
    fn variant_shapes() {
        let spec = random_spec(32, 8, 20, 1);
        let full = Model::<f32>::build(tiny_config(Variant::Full), 0).unwrap();
        let out = full.forward_one(&spec, &[]).unwrap();
        assert_eq!(out.frame_posteriors.dim(), (8, 3));
        assert_eq!(out.valid_frames, 5);
        assert_eq!(out.reconstruction.as_ref().unwrap().dim(), (32, 8));

        let no_ae = Model::<f32>::build(tiny_config(Variant::NoAe), 0).unwrap();
        let out = no_ae.forward_one(&spec, &[]).unwrap();
        assert!(out.reconstruction.is_none());
        assert!(no_ae.parameter_count() < full.parameter_count());

        let nobn = Model::<f32>::build(tiny_config(Variant::AeNoBn), 0).unwrap();
        let out = nobn.forward_one(&spec, &[]).unwrap();
        assert_eq!(out.frame_posteriors.dim(), (32, 3));
        assert_eq!(out.valid_frames, 20);
    }

    #[test]
    fn geometry_mismatch() {
        let m = Model::<f32>::build(tiny_config(Variant::Full), 0).unwrap();
        assert!(matches!(m.forward_one(&random_spec(30, 8, 30, 0), &[]), Err(Error::Shape(_))));
        assert!(matches!(m.forward_one(&random_spec(32, 8, 0, 0), &[]), Err(Error::Shape(_))));
        assert!(m.forward_one(&random_spec(32, 8, 32, 0), &[LayerId::Conv(3)]).is_err());
    }

    #[test]
    fn captured_activation_shapes() {
        let m = Model::<f32>::build(tiny_config(Variant::Full), 0).unwrap();
        let layers = m.layers();
        let out = m.forward_one(&random_spec(32, 8, 32, 2), &layers).unwrap();
        assert_eq!(out.activations[&LayerId::Conv(2)].data.dim(), (32, 8, 4));
        assert_eq!(out.activations[&LayerId::Gru].data.dim(), (32, 1, 4));
        assert_eq!(out.activations[&LayerId::Bottleneck].data.dim(), (8, 1, 4));
        assert_eq!(out.activations[&LayerId::Bottleneck].stride, 4);
        assert_eq!(out.activations[&LayerId::Dense].data.dim(), (8, 1, 6));
        assert_eq!(out.activations[&LayerId::DecConv(1)].data.dim(), (32, 8, 4));
        assert_eq!(out.activations[&LayerId::DecPost].data.dim(), (32, 8, 1));
    }

    #[test]
    fn ae_pred_target_shifts_ahead() {
        let m = Model::<f64>::build(tiny_config(Variant::AePred), 0).unwrap();
        assert_eq!(m.config().ae_shift_frames(), 5);
        let x = Array2::from_shape_fn((32, 8), |(t, f)| (t * 8 + f) as f64);
        let (y, valid) = m.ae_target(&x, 30);
        assert_eq!(valid, 25);
        assert_eq!(y[[0, 0]], x[[5, 0]]);
        assert_eq!(y[[26, 3]], x[[31, 3]]);
    }

    #[test]
    fn deterministic_build_and_inference() {
        let a = Model::<f32>::build(tiny_config(Variant::Full), 7).unwrap();
        let b = Model::<f32>::build(tiny_config(Variant::Full), 7).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(tiny_config(Variant::Full), 8).unwrap();
        assert_ne!(a.params, c.params);
        let spec = random_spec(32, 8, 25, 3);
        assert_eq!(a.forward_one(&spec, &[]).unwrap(), a.forward_one(&spec, &[]).unwrap());
    }
}
