//! Differentiable speech feature pipeline.
//!
//! Waveform → Hamming-windowed frames → real DFT as two matrix products →
//! smooth modulus `sqrt(ε + re² + im²)` → mixed linear/mel filterbank →
//! `log(· + floor)` → deltas and delta-deltas over time. Every stage is
//! recorded on a [`Graph`], so gradients flow back to either the waveform
//! samples or a magnitude spectrogram.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_len_samples: usize,
    pub hop_samples: usize,
    pub dft_size: usize,
    pub num_channels: usize,
    pub linear_mel_boundary_hz: f64,
    pub fmax_hz: f64,
    pub modulus_epsilon: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16000,
            window_len_samples: 400,
            hop_samples: 160,
            dft_size: 512,
            num_channels: 80,
            linear_mel_boundary_hz: 1000.0,
            fmax_hz: 8000.0,
            modulus_epsilon: 1e-3,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    /// 20-channel front end for the toy network: 8 linear bins below 250 Hz
    /// and 12 mel triangles up to 8 kHz.
    pub fn toy() -> Self {
        Self {
            num_channels: 20,
            linear_mel_boundary_hz: 250.0,
            ..Self::default()
        }
    }

    pub fn kept_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.dft_size as f64
    }

    /// Number of STFT bins strictly below the linear/mel boundary.
    pub fn linear_channels(&self) -> usize {
        (self.linear_mel_boundary_hz / self.bin_hz()).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.window_len_samples == 0 || self.window_len_samples > self.dft_size {
            return bad(format!(
                "window length {} must be in 1..={}",
                self.window_len_samples, self.dft_size
            ));
        }
        if self.hop_samples == 0 || self.hop_samples > self.window_len_samples {
            return bad(format!("hop {} must be in 1..=window length", self.hop_samples));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.linear_mel_boundary_hz > 0.0 && self.linear_mel_boundary_hz < self.fmax_hz && self.fmax_hz <= nyquist)
        {
            return bad(format!(
                "need 0 < boundary ({}) < fmax ({}) <= sample_rate/2 ({nyquist})",
                self.linear_mel_boundary_hz, self.fmax_hz
            ));
        }
        if self.num_channels <= self.linear_channels() {
            return bad(format!(
                "{} channels cannot cover {} linear bins plus mel bands",
                self.num_channels,
                self.linear_channels()
            ));
        }
        if self.modulus_epsilon < 0.0 || self.log_floor <= 0.0 {
            return bad("modulus epsilon must be >= 0 and log floor > 0".into());
        }
        Ok(())
    }

    /// Frames produced for `len` samples.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.window_len_samples).then(|| (len - self.window_len_samples) / self.hop_samples + 1)
    }

    /// Samples spanned by `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        (frames - 1) * self.hop_samples + self.window_len_samples
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.samples.clone())
    }
}

/// `T × B` non-negative magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Tensor,
}

impl MagnitudeSpectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "spectrogram must be T x B, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::InvalidArgument("negative or NaN magnitude".into()));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `T × C × 3` log filterbank features: static, delta, delta-delta.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub values: Tensor,
}

impl FeatureTensor {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// `E(t)`: sum over the static log-filterbank channels of each frame.
    pub fn frame_energies(&self) -> Vec<f64> {
        let c = self.channels();
        self.values
            .data()
            .chunks(c * 3)
            .map(|row| (0..c).map(|k| row[k * 3]).sum())
            .collect()
    }
}

/// Input accepted by [`Frontend::features`].
pub enum FeatureInput<'a> {
    Waveform(&'a Waveform),
    Spectrogram(&'a MagnitudeSpectrogram),
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `B × C` mixed linear/mel filterbank.
pub fn build_filterbank(cfg: &FrontendConfig) -> Result<Tensor> {
    cfg.validate()?;
    let bins = cfg.kept_bins();
    let channels = cfg.num_channels;
    let linear = cfg.linear_channels();
    let mel_count = channels - linear;
    let bin_hz = cfg.bin_hz();
    let mut fb = Tensor::zeros(&[bins, channels]);
    for k in 0..linear {
        fb.set(&[k, k], 1.0);
    }
    let (lo, hi) = (hz_to_mel(cfg.linear_mel_boundary_hz), hz_to_mel(cfg.fmax_hz));
    let edges: Vec<f64> = (0..mel_count + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_count + 1) as f64))
        .collect();
    for m in 0..mel_count {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let ch = linear + m;
        let mut total = 0.0;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                fb.set(&[k, ch], w);
                total += w;
            }
        }
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mel channel {ch} ({left:.1}-{right:.1} Hz) covers no DFT bin"
            )));
        }
    }
    Ok(fb)
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Precomputed matrices for one [`FrontendConfig`].
#[derive(Clone, Debug)]
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    /// rows `0..window_len` of the real and imaginary DFT matrices
    dft_re: Tensor,
    dft_im: Tensor,
    filterbank: Tensor,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        let filterbank = build_filterbank(&cfg)?;
        let (dft_re, dft_im) = dft_rows(&cfg, cfg.window_len_samples);
        Ok(Self {
            window: hamming(cfg.window_len_samples),
            cfg,
            dft_re,
            dft_im,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Full `dft_size × kept_bins` real and imaginary DFT matrices.
    pub fn dft_matrices(&self) -> (Tensor, Tensor) {
        dft_rows(&self.cfg, self.cfg.dft_size)
    }

    fn frame_indices(&self, len: usize) -> Result<(usize, Arc<Vec<usize>>)> {
        let w = self.cfg.window_len_samples;
        let t = self.cfg.num_frames(len).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "waveform of {len} samples is shorter than one {w}-sample window"
            ))
        })?;
        let idx = (0..t)
            .flat_map(|f| (0..w).map(move |n| f * self.cfg.hop_samples + n))
            .collect();
        Ok((t, Arc::new(idx)))
    }

    /// `T × window_len` Hamming-windowed frames of a 1-D waveform node.
    pub fn graph_frames(&self, g: &mut Graph, wave: NodeId) -> Result<NodeId> {
        let len = g.shape(wave).iter().product();
        let (t, idx) = self.frame_indices(len)?;
        let w = self.cfg.window_len_samples;
        let frames = g.gather(wave, idx, &[t, w])?;
        let tiled: Vec<f64> = (0..t).flat_map(|_| self.window.iter().copied()).collect();
        let win = g.constant(Tensor::new(vec![t, w], tiled)?);
        g.mul(frames, win)
    }

    /// Smooth-modulus magnitude `T × B` of windowed frames.
    pub fn graph_magnitude(&self, g: &mut Graph, frames: NodeId) -> Result<NodeId> {
        let re_m = g.constant(self.dft_re.clone());
        let im_m = g.constant(self.dft_im.clone());
        let re = g.matmul(frames, re_m)?;
        let im = g.matmul(frames, im_m)?;
        let re2 = g.square(re)?;
        let im2 = g.square(im)?;
        let power = g.add(re2, im2)?;
        let smoothed = g.add_scalar(power, self.cfg.modulus_epsilon)?;
        g.sqrt(smoothed)
    }

    /// `T × C` log filterbank energies from a magnitude node.
    pub fn graph_log_filterbank(&self, g: &mut Graph, mag: NodeId) -> Result<NodeId> {
        let shape = g.shape(mag).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.kept_bins() {
            return Err(Error::ShapeMismatch {
                op: "features",
                detail: format!("magnitude {shape:?}, expected [T, {}]", self.cfg.kept_bins()),
            });
        }
        let fb = g.constant(self.filterbank.clone());
        let energies = g.matmul(mag, fb)?;
        let floored = g.add_scalar(energies, self.cfg.log_floor)?;
        g.log(floored)
    }

    /// `0.1 · ((x[t+1] − x[t−1]) + 2 (x[t+2] − x[t−2]))` with replicated edges.
    fn graph_delta(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (t, c) = (g.shape(x)[0], g.shape(x)[1]);
        let shifted = |g: &mut Graph, shift: isize| -> Result<NodeId> {
            let idx: Vec<usize> = (0..t)
                .flat_map(|r| {
                    let src = (r as isize + shift).clamp(0, t as isize - 1) as usize;
                    (0..c).map(move |k| src * c + k)
                })
                .collect();
            g.gather(x, Arc::new(idx), &[t, c])
        };
        let (p1, m1) = (shifted(g, 1)?, shifted(g, -1)?);
        let (p2, m2) = (shifted(g, 2)?, shifted(g, -2)?);
        let near = g.sub(p1, m1)?;
        let far = g.sub(p2, m2)?;
        let far2 = g.mul_scalar(far, 2.0)?;
        let sum = g.add(near, far2)?;
        g.mul_scalar(sum, 0.1)
    }

    /// `T × C × 3` features from a magnitude node.
    pub fn graph_features_from_magnitude(&self, g: &mut Graph, mag: NodeId) -> Result<NodeId> {
        let stat = self.graph_log_filterbank(g, mag)?;
        let delta = self.graph_delta(g, stat)?;
        let delta2 = self.graph_delta(g, delta)?;
        let (t, c) = (g.shape(stat)[0], g.shape(stat)[1]);
        let parts = [stat, delta, delta2]
            .into_iter()
            .map(|n| g.reshape(n, &[t, c, 1]))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts, 2)
    }

    pub fn graph_features_from_waveform(&self, g: &mut Graph, wave: NodeId) -> Result<NodeId> {
        let frames = self.graph_frames(g, wave)?;
        let mag = self.graph_magnitude(g, frames)?;
        self.graph_features_from_magnitude(g, mag)
    }

    /// Per-frame `E(t)` as a `[T]` node.
    pub fn graph_frame_energy(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let (t, c) = (g.shape(features)[0], g.shape(features)[1]);
        let idx: Vec<usize> = (0..t * c).map(|i| i * 3).collect();
        let stat = g.gather(features, Arc::new(idx), &[t, c])?;
        g.sum_axes(stat, &[1])
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(Error::UnsupportedAudio {
                field: "sample rate",
                found: format!("{} Hz", w.sample_rate_hz),
                expected: format!("{} Hz", self.cfg.sample_rate_hz),
            });
        }
        Ok(())
    }

    pub fn frame_and_window(&self, w: &Waveform) -> Result<Tensor> {
        self.check_rate(w)?;
        let mut g = Graph::new(Precision::High);
        let x = g.constant(w.to_tensor());
        let f = self.graph_frames(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    pub fn dft_magnitude(&self, frames: &Tensor) -> Result<MagnitudeSpectrogram> {
        if frames.rank() != 2 || frames.shape()[1] != self.cfg.window_len_samples {
            return Err(Error::ShapeMismatch {
                op: "dft_magnitude",
                detail: format!(
                    "frames {:?}, expected [T, {}]",
                    frames.shape(),
                    self.cfg.window_len_samples
                ),
            });
        }
        let mut g = Graph::new(Precision::High);
        let x = g.constant(frames.clone());
        let m = self.graph_magnitude(&mut g, x)?;
        MagnitudeSpectrogram::new(g.value(m).clone())
    }

    pub fn features(&self, input: FeatureInput<'_>) -> Result<FeatureTensor> {
        let mut g = Graph::new(Precision::High);
        let f = match input {
            FeatureInput::Waveform(w) => {
                self.check_rate(w)?;
                let x = g.constant(w.to_tensor());
                self.graph_features_from_waveform(&mut g, x)?
            }
            FeatureInput::Spectrogram(s) => {
                let x = g.constant(s.values.clone());
                self.graph_features_from_magnitude(&mut g, x)?
            }
        };
        Ok(FeatureTensor {
            values: g.value(f).clone(),
        })
    }

    pub fn waveform_features(&self, w: &Waveform) -> Result<FeatureTensor> {
        self.features(FeatureInput::Waveform(w))
    }

    /// Smooth-modulus spectrogram of a waveform.
    pub fn spectrogram(&self, w: &Waveform) -> Result<MagnitudeSpectrogram> {
        let frames = self.frame_and_window(w)?;
        self.dft_magnitude(&frames)
    }
}

fn dft_rows(cfg: &FrontendConfig, rows: usize) -> (Tensor, Tensor) {
    let bins = cfg.kept_bins();
    let n = cfg.dft_size as f64;
    let mut re = Vec::with_capacity(rows * bins);
    let mut im = Vec::with_capacity(rows * bins);
    for r in 0..rows {
        for k in 0..bins {
            // reduce the phase index modulo N before scaling to keep it exact
            let phase = 2.0 * PI * ((r * k) % cfg.dft_size) as f64 / n;
            re.push(phase.cos());
            im.push(-phase.sin());
        }
    }
    (
        Tensor::new(vec![rows, bins], re).expect("dims"),
        Tensor::new(vec![rows, bins], im).expect("dims"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontend() -> Frontend {
        Frontend::new(FrontendConfig::default()).unwrap()
    }

    fn sine(freq: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len).map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin()).collect(),
            16000,
        )
    }

    #[test]
    fn frame_counts() {
        let fe = frontend();
        assert_eq!(fe.frame_and_window(&sine(100.0, 16000)).unwrap().shape(), &[98, 400]);
        assert_eq!(fe.frame_and_window(&sine(100.0, 400)).unwrap().shape(), &[1, 400]);
        assert!(fe.frame_and_window(&sine(100.0, 399)).is_err());
    }

    #[test]
    fn constant_frame_is_the_window() {
        let fe = frontend();
        let frames = fe.frame_and_window(&Waveform::new(vec![1.0; 400], 16000)).unwrap();
        assert_eq!(frames.data(), fe.window());
        assert!((fe.window()[0] - 0.08).abs() < 1e-12);
        assert!((fe.window()[399] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn zero_frame_gives_sqrt_epsilon() {
        let fe = frontend();
        let mag = fe.dft_magnitude(&Tensor::zeros(&[1, 400])).unwrap();
        assert_eq!(mag.bins(), 257);
        for &v in mag.values.data() {
            assert!((v - 0.001f64.sqrt()).abs() < 1e-15);
            assert!((v - 0.0316228).abs() < 1e-7);
        }
    }

    #[test]
    fn smooth_modulus_of_three_four() {
        // re=3, im=4 at bin 0 only: a frame whose DC sum is 3 cannot carry an
        // imaginary part, so check the formula through the graph directly.
        let mut g = Graph::new(Precision::High);
        let re = g.constant(Tensor::scalar(3.0));
        let im = g.constant(Tensor::scalar(4.0));
        let (r2, i2) = (g.square(re).unwrap(), g.square(im).unwrap());
        let p = g.add(r2, i2).unwrap();
        let s = g.add_scalar(p, 1e-3).unwrap();
        let m = g.sqrt(s).unwrap();
        assert!((g.value(m).item() - 25.001f64.sqrt()).abs() < 1e-12);
        assert!((g.value(m).item() - 5.00010).abs() < 1e-5);
    }

    #[test]
    fn one_khz_peak_at_bin_32() {
        let fe = frontend();
        let mag = fe.spectrogram(&sine(1000.0, 1600)).unwrap();
        for row in mag.values.data().chunks(257) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            assert_eq!(arg, 32);
        }
    }

    #[test]
    fn filterbank_structure() {
        let cfg = FrontendConfig::default();
        assert_eq!(cfg.linear_channels(), 32);
        let fb = build_filterbank(&cfg).unwrap();
        assert_eq!(fb.shape(), &[257, 80]);
        for ch in 0..32 {
            for k in 0..257 {
                assert_eq!(fb.get(&[k, ch]), if k == ch { 1.0 } else { 0.0 });
            }
        }
        for ch in 32..80 {
            let col: Vec<f64> = (0..257).map(|k| fb.get(&[k, ch])).collect();
            assert!(col.iter().all(|&v| v >= 0.0));
            assert!(col.iter().sum::<f64>() > 0.0);
            let peak = col
                .iter()
                .enumerate()
                .fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            assert!(col[..peak].windows(2).all(|w| w[0] <= w[1]), "channel {ch} rises");
            assert!(col[peak..].windows(2).all(|w| w[0] >= w[1]), "channel {ch} falls");
            // mel region starts at 1 kHz
            assert!((0..32).all(|k| fb.get(&[k, ch]) == 0.0));
        }
    }

    #[test]
    fn filterbank_rejects_too_few_channels() {
        let cfg = FrontendConfig {
            num_channels: 30,
            ..FrontendConfig::default()
        };
        assert!(build_filterbank(&cfg).is_err());
    }

    #[test]
    fn toy_filterbank_has_eight_linear_bins() {
        let cfg = FrontendConfig::toy();
        assert_eq!(cfg.linear_channels(), 8);
        assert_eq!(build_filterbank(&cfg).unwrap().shape(), &[257, 20]);
    }

    #[test]
    fn silence_features() {
        let fe = frontend();
        let feats = fe.waveform_features(&Waveform::new(vec![0.0; 2000], 16000)).unwrap();
        let fb = fe.filterbank();
        let t = feats.frames();
        for ch in 0..80 {
            let colsum: f64 = (0..257).map(|k| fb.get(&[k, ch])).sum();
            let expect = (0.001f64.sqrt() * colsum + 1e-6).ln();
            for r in 0..t {
                assert!((feats.values.get(&[r, ch, 0]) - expect).abs() < 1e-12);
                assert_eq!(feats.values.get(&[r, ch, 1]), 0.0);
                assert_eq!(feats.values.get(&[r, ch, 2]), 0.0);
            }
        }
    }

    #[test]
    fn waveform_path_factorizes_through_spectrogram() {
        let fe = frontend();
        let w = Waveform::new(
            (0..3000).map(|n| ((n * 7919) % 1000) as f64 / 1000.0 - 0.5).collect(),
            16000,
        );
        let direct = fe.waveform_features(&w).unwrap();
        let spec = fe.spectrogram(&w).unwrap();
        let via = fe.features(FeatureInput::Spectrogram(&spec)).unwrap();
        assert_eq!(direct, via);
    }

    #[test]
    fn one_hop_delay_shifts_rows() {
        let fe = frontend();
        let base: Vec<f64> = (0..4000)
            .map(|n| (n as f64 * 0.031).sin() * (n as f64 * 0.0007).cos())
            .collect();
        let w = Waveform::new(base.clone(), 16000);
        let mut delayed = vec![0.0; 160];
        delayed.extend_from_slice(&base[..base.len() - 160]);
        let a = fe.waveform_features(&Waveform::new(delayed, 16000)).unwrap();
        let b = fe.waveform_features(&w).unwrap();
        let (t, c) = (b.frames(), b.channels());
        // interior rows far enough from both ends that replicate padding of
        // the two delta stages does not reach them
        for r in 4..t - 5 {
            for k in 0..c * 3 {
                let x = a.values.data()[(r + 1) * c * 3 + k];
                let y = b.values.data()[r * c * 3 + k];
                assert!((x - y).abs() < 1e-6, "row {r} elem {k}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn constant_input_has_zero_deltas() {
        let fe = frontend();
        let spec = MagnitudeSpectrogram::new(Tensor::full(&[9, 257], 0.7)).unwrap();
        let f = fe.features(FeatureInput::Spectrogram(&spec)).unwrap();
        for r in 0..9 {
            for ch in 0..80 {
                assert_eq!(f.values.get(&[r, ch, 1]), 0.0);
            }
        }
    }

    #[test]
    fn rejects_wrong_rate() {
        let fe = frontend();
        let err = fe
            .waveform_features(&Waveform::new(vec![0.0; 1000], 44100))
            .unwrap_err();
        assert!(err.to_string().contains("44100"));
    }
}
