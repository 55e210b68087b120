//! Log-Mel spectrogram extraction and fixed-geometry padding.

mod store;

pub use store::{FeatureStore, FEATURE_STORE_VERSION};

use ndarray::{s, Array2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Front-end parameters. Defaults: 16 kHz, 25 ms Hamming window, 10 ms hop,
/// 24 Mel bands over 0..8000 Hz, energy floor 1e-10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mel_bands: usize,
    pub mel_fmin_hz: f64,
    pub mel_fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mel_bands: 24,
            mel_fmin_hz: 0.0,
            mel_fmax_hz: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("feature params: {m}")));
        if !(self.hop_ms > 0.0) || self.window_ms < self.hop_ms {
            return bad("need window_ms >= hop_ms > 0");
        }
        if self.n_mel_bands == 0 {
            return bad("n_mel_bands must be >= 1");
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.mel_fmin_hz >= 0.0 && self.mel_fmin_hz < self.mel_fmax_hz && self.mel_fmax_hz <= nyquist) {
            return bad("need 0 <= mel_fmin < mel_fmax <= sample_rate/2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if self.win_samples() == 0 || self.hop_samples() == 0 {
            return bad("window or hop shorter than one sample");
        }
        Ok(())
    }

    pub fn win_samples(&self) -> usize {
        (self.window_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.win_samples().next_power_of_two()
    }

    /// Value used for padded (silent) frames.
    pub fn pad_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Time x band log-energy matrix. Frames `0..n_valid` are real, the rest padding.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    values: Array2<f32>,
    n_valid: usize,
    params: FeatureParams,
}

impl LogMelSpectrogram {
    /// Builds a spectrogram whose first `n_valid` frames are real.
    pub fn new(values: Array2<f32>, n_valid: usize, params: FeatureParams) -> Result<Self> {
        if n_valid > values.nrows() {
            return Err(Error::Shape(format!(
                "n_valid {n_valid} exceeds {} frames",
                values.nrows()
            )));
        }
        if values.ncols() != params.n_mel_bands {
            return Err(Error::Shape(format!(
                "{} bands, params declare {}",
                values.ncols(),
                params.n_mel_bands
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite log-Mel value".into()));
        }
        Ok(LogMelSpectrogram { values, n_valid, params })
    }

    /// Builds a fully valid spectrogram (mask all true).
    pub fn from_values(values: Array2<f32>, params: FeatureParams) -> Result<Self> {
        let n = values.nrows();
        Self::new(values, n, params)
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.values.ncols()
    }

    /// Number of real frames; the validity mask is `[true; n_valid] ++ [false; ..]`.
    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.n_frames()).map(|t| t < self.n_valid).collect()
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular Mel filters.
pub fn mel_band_centers(params: &FeatureParams) -> Vec<f64> {
    let edges = mel_edges(params);
    edges[1..edges.len() - 1].to_vec()
}

fn mel_edges(params: &FeatureParams) -> Vec<f64> {
    let lo = hz_to_mel(params.mel_fmin_hz);
    let hi = hz_to_mel(params.mel_fmax_hz);
    let n = params.n_mel_bands + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular filterbank `[n_mel_bands x (fft_size/2 + 1)]` with unit peaks.
pub fn mel_filterbank(params: &FeatureParams) -> Array2<f64> {
    let n_fft = params.fft_size();
    let n_bins = n_fft / 2 + 1;
    let edges = mel_edges(params);
    let mut fb = Array2::zeros((params.n_mel_bands, n_bins));
    for m in 0..params.n_mel_bands {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * params.sample_rate_hz as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Log-Mel energies of a waveform: Hamming-windowed power spectrum, triangular
/// Mel filters, natural log with an energy floor.
pub fn compute_logmel(waveform: &[f32], params: &FeatureParams) -> Result<LogMelSpectrogram> {
    params.validate()?;
    let win = params.win_samples();
    let hop = params.hop_samples();
    if waveform.len() < win {
        return Err(Error::TooShort { len: waveform.len(), needed: win });
    }
    let n_frames = 1 + (waveform.len() - win) / hop;
    let n_fft = params.fft_size();
    let n_bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1).max(1) as f64).cos())
        .collect();
    let fb = mel_filterbank(params);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut values = Array2::<f32>::zeros((n_frames, params.n_mel_bands));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    for t in 0..n_frames {
        let frame = &waveform[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..params.n_mel_bands {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            values[[t, m]] = e.max(params.log_floor).ln() as f32;
        }
    }
    LogMelSpectrogram::from_values(values, params.clone())
}

/// Pads (with silence rows, masked) or truncates the tail to `target_frames`.
pub fn pad_or_clip(spec: &LogMelSpectrogram, target_frames: usize) -> Result<LogMelSpectrogram> {
    if target_frames == 0 {
        return Err(Error::InvalidArgument("target_frames must be >= 1".into()));
    }
    let n = spec.n_frames();
    let bands = spec.n_bands();
    let mut values = Array2::from_elem((target_frames, bands), spec.params.pad_value());
    let keep = n.min(target_frames);
    values.slice_mut(s![..keep, ..]).assign(&spec.values.slice(s![..keep, ..]));
    let n_valid = spec.n_valid.min(target_frames);
    // Frames past the old validity prefix keep their (padding) contents.
    LogMelSpectrogram::new(values, n_valid, spec.params.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, amp: f64, sr: u32) -> Vec<f32> {
        let n = (secs * sr as f64) as usize;
        (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn silence_gives_floor_everywhere() {
        let p = FeatureParams::default();
        let spec = compute_logmel(&vec![0.0; 16_000], &p).unwrap();
        // 1 + floor((16000 - 400) / 160)
        assert_eq!(spec.n_frames(), 98);
        assert_eq!(spec.n_bands(), 24);
        assert_eq!(spec.n_valid(), 98);
        let floor = (1e-10f64).ln() as f32;
        assert!(spec.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let p = FeatureParams::default();
        let centers = mel_band_centers(&p);
        for band in [2usize, 5, 9, 12, 16, 20, 23] {
            let wav = sine(centers[band], 0.3, 0.5, p.sample_rate_hz);
            let spec = compute_logmel(&wav, &p).unwrap();
            for row in spec.values().rows() {
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, band, "center {:.1} Hz", centers[band]);
            }
        }
    }

    #[test]
    fn too_short_waveform() {
        let p = FeatureParams::default();
        assert!(matches!(
            compute_logmel(&[0.0; 399], &p),
            Err(Error::TooShort { len: 399, needed: 400 })
        ));
        assert_eq!(compute_logmel(&[0.0; 400], &p).unwrap().n_frames(), 1);
    }

    #[test]
    fn bad_params_rejected() {
        let mut p = FeatureParams::default();
        p.mel_fmax_hz = 9_000.0;
        assert!(p.validate().is_err());
        let mut p = FeatureParams::default();
        p.hop_ms = 30.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn amplitude_doubling_shifts_log_energy() {
        let p = FeatureParams::default();
        let wav = sine(1000.0, 0.2, 0.1, p.sample_rate_hz);
        let wav2: Vec<f32> = wav.iter().map(|x| 2.0 * x).collect();
        let a = compute_logmel(&wav, &p).unwrap();
        let b = compute_logmel(&wav2, &p).unwrap();
        let floor = p.pad_value();
        let shift = (4.0f64).ln();
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > floor + 1.0 {
                assert!(((y - x) as f64 - shift).abs() < 1e-4);
            }
        }
    }

    fn spec_with(frames: usize) -> LogMelSpectrogram {
        let p = FeatureParams::default();
        let v = Array2::from_shape_fn((frames, 24), |(t, b)| (t * 24 + b) as f32 * 0.01);
        LogMelSpectrogram::from_values(v, p).unwrap()
    }

    #[test]
    fn pad_short_input() {
        let s = spec_with(100);
        let out = pad_or_clip(&s, 512).unwrap();
        assert_eq!(out.n_frames(), 512);
        assert_eq!(out.mask().iter().filter(|m| **m).count(), 100);
        assert_eq!(out.values().slice(s![..100, ..]), s.values());
        assert!(out.values().slice(s![100.., ..]).iter().all(|&v| v == s.params().pad_value()));
    }

    #[test]
    fn clip_long_input_keeps_onset() {
        let s = spec_with(600);
        let out = pad_or_clip(&s, 512).unwrap();
        assert_eq!(out.n_frames(), 512);
        assert_eq!(out.n_valid(), 512);
        assert_eq!(out.values(), &s.values().slice(s![..512, ..]));
    }

    #[test]
    fn exact_length_is_identity() {
        let s = spec_with(512);
        assert_eq!(pad_or_clip(&s, 512).unwrap(), s);
        assert!(pad_or_clip(&s, 0).is_err());
    }

    proptest! {
        #[test]
        fn pad_or_clip_idempotent(frames in 1usize..80, valid_frac in 0.0f64..=1.0, target in 1usize..100) {
            let s = spec_with(frames);
            let n_valid = ((frames as f64) * valid_frac) as usize;
            let s = LogMelSpectrogram::new(s.values().clone(), n_valid, s.params().clone()).unwrap();
            let once = pad_or_clip(&s, target).unwrap();
            let twice = pad_or_clip(&once, target).unwrap();
            prop_assert_eq!(&once, &twice);
            let mask = once.mask();
            // contiguous validity prefix
            prop_assert!(mask.windows(2).all(|w| w[0] || !w[1]));
            prop_assert_eq!(once.n_valid(), n_valid.min(target));
        }
    }
}
