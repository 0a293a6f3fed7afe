//! STFT analysis/synthesis and Griffin-Lim phase reconstruction.
//!
//! Framing matches the feature front end: Hamming windows of
//! `window_len_samples`, zero padded to `dft_size`, `dft_size/2 + 1` bins kept.
//! Synthesis windows each inverse frame again and divides the overlap-add by
//! the summed squared window, which makes `istft(stft(w)) == w` wherever that
//! sum exceeds the floor.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::frontend::{hamming, FrontendConfig, MagnitudeSpectrogram, Waveform};

pub const NORMALIZATION_FLOOR: f64 = 1e-8;

/// `T × B` complex spectrogram, row major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            values: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    /// Exact modulus, no smoothing.
    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }
}

pub struct Stft {
    cfg: FrontendConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            window: hamming(cfg.window_len_samples),
            forward: planner.plan_fft_forward(cfg.dft_size),
            inverse: planner.plan_fft_inverse(cfg.dft_size),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn analyze(&self, samples: &[f64]) -> Result<ComplexSpectrogram> {
        let (w, hop, n, bins) = self.dims();
        let t = self.cfg.num_frames(samples.len()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} samples is shorter than one {w}-sample window",
                samples.len()
            ))
        })?;
        let mut out = ComplexSpectrogram::zeros(t, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..t {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (k, c) in buf.iter_mut().take(w).enumerate() {
                c.re = samples[f * hop + k] * self.window[k];
            }
            self.forward.process(&mut buf);
            out.values[f * bins..(f + 1) * bins].copy_from_slice(&buf[..bins]);
        }
        Ok(out)
    }

    /// Real inverse DFT of one half spectrum, all `dft_size` samples.
    pub fn inverse_frame(&self, half: &[Complex64]) -> Vec<f64> {
        let (_, _, n, bins) = self.dims();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..bins].copy_from_slice(half);
        for k in 1..n - bins + 1 {
            buf[n - k] = half[k].conj();
        }
        // the DC and Nyquist bins of a real signal are real
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    /// Overlap-add synthesis with window-square normalization; the output has
    /// `samples_for_frames(T)` samples.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let (w, hop, _, bins) = self.dims();
        if spec.bins != bins || spec.frames == 0 {
            return Err(Error::ShapeMismatch {
                op: "istft",
                detail: format!("{}x{} spectrogram, expected T x {bins}", spec.frames, spec.bins),
            });
        }
        let len = self.cfg.samples_for_frames(spec.frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        for f in 0..spec.frames {
            let frame = self.inverse_frame(&spec.values[f * bins..(f + 1) * bins]);
            for k in 0..w {
                out[f * hop + k] += frame[k] * self.window[k];
                norm[f * hop + k] += self.window[k] * self.window[k];
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o /= n.max(NORMALIZATION_FLOOR);
        }
        Ok(out)
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.cfg.window_len_samples,
            self.cfg.hop_samples,
            self.cfg.dft_size,
            self.cfg.kept_bins(),
        )
    }
}

pub fn istft_overlap_add(spec: &ComplexSpectrogram, cfg: &FrontendConfig) -> Result<Waveform> {
    let stft = Stft::new(cfg)?;
    Ok(Waveform::new(stft.synthesize(spec)?, cfg.sample_rate_hz))
}

/// Exact-modulus `T × B` STFT magnitudes.
pub fn exact_magnitude(w: &Waveform, cfg: &FrontendConfig) -> Result<MagnitudeSpectrogram> {
    let stft = Stft::new(cfg)?;
    let spec = stft.analyze(&w.samples)?;
    MagnitudeSpectrogram::new(crate::Tensor::new(vec![spec.frames, spec.bins], spec.magnitude())?)
}

/// `‖|S| − mag‖_F / ‖mag‖_F`, defined as 0 when `mag` is all zero.
pub fn spectral_convergence(spec: &ComplexSpectrogram, mag: &[f64]) -> f64 {
    let reference: f64 = mag.iter().map(|m| m * m).sum::<f64>().sqrt();
    if reference == 0.0 {
        return 0.0;
    }
    let diff: f64 = spec
        .values
        .iter()
        .zip(mag)
        .map(|(c, m)| (c.norm() - m).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / reference
}

#[derive(Clone, Debug, PartialEq)]
pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// spectral convergence of the waveform produced by each iteration
    pub convergence: Vec<f64>,
}

impl GriffinLimResult {
    pub fn final_convergence(&self) -> f64 {
        self.convergence.last().copied().unwrap_or(0.0)
    }
}

/// Alternates `w ← istft(mag·e^{iφ})` and `φ ← arg stft(w)` from a random
/// phase. The returned waveform is the last synthesized one.
pub fn griffin_lim(
    mag: &MagnitudeSpectrogram,
    cfg: &FrontendConfig,
    iters: usize,
    seed: u64,
) -> Result<GriffinLimResult> {
    let stft = Stft::new(cfg)?;
    let (t, b) = (mag.frames(), mag.bins());
    if b != cfg.kept_bins() {
        return Err(Error::ShapeMismatch {
            op: "griffin_lim",
            detail: format!("magnitude {t}x{b}, expected T x {}", cfg.kept_bins()),
        });
    }
    let m = mag.values.data();
    let len = cfg.samples_for_frames(t);
    if m.iter().all(|&v| v == 0.0) {
        return Ok(GriffinLimResult {
            waveform: Waveform::new(vec![0.0; len], cfg.sample_rate_hz),
            convergence: vec![0.0; iters],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<Complex64> = (0..t * b)
        .map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let mut spec = ComplexSpectrogram::zeros(t, b);
    let mut samples = vec![0.0; len];
    let mut convergence = Vec::with_capacity(iters);
    for _ in 0..iters {
        for ((s, p), &a) in spec.values.iter_mut().zip(&phase).zip(m) {
            *s = p * a;
        }
        samples = stft.synthesize(&spec)?;
        let analyzed = stft.analyze(&samples)?;
        convergence.push(spectral_convergence(&analyzed, m));
        for (p, c) in phase.iter_mut().zip(&analyzed.values) {
            let r = c.norm();
            *p = if r > 0.0 { c / r } else { Complex64::new(1.0, 0.0) };
        }
    }
    if iters == 0 {
        for ((s, p), &a) in spec.values.iter_mut().zip(&phase).zip(m) {
            *s = p * a;
        }
        samples = stft.synthesize(&spec)?;
    }
    Ok(GriffinLimResult {
        waveform: Waveform::new(samples, cfg.sample_rate_hz),
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize) -> Vec<f64> {
        (0..len).map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = FrontendConfig::default();
        let stft = Stft::new(&cfg).unwrap();
        let x: Vec<f64> = (0..4000).map(|n| ((n * 7919) % 211) as f64 / 105.0 - 1.0).collect();
        let spec = stft.analyze(&x).unwrap();
        let y = stft.synthesize(&spec).unwrap();
        assert_eq!(y.len(), cfg.samples_for_frames(spec.frames));
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = y.iter().zip(&x).map(|(_, a)| a * a).sum();
        assert!((num / den).sqrt() < 1e-12);
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let cfg = FrontendConfig::default();
        let w = istft_overlap_add(&ComplexSpectrogram::zeros(5, 257), &cfg).unwrap();
        assert_eq!(w.len(), 400 + 4 * 160);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn impulse_frame_obeys_parseval() {
        let cfg = FrontendConfig::default();
        let stft = Stft::new(&cfg).unwrap();
        let mut half = vec![Complex64::new(0.0, 0.0); 257];
        half[0] = Complex64::new(1.0, 0.0);
        half[17] = Complex64::new(0.3, -0.8);
        half[256] = Complex64::new(-0.5, 0.0);
        let x = stft.inverse_frame(&half);
        let time: f64 = x.iter().map(|v| v * v).sum();
        let full: f64 = half[0].norm_sqr() + half[256].norm_sqr() + 2.0 * half[17].norm_sqr();
        assert!((time - full / 512.0).abs() < 1e-6 * time);
        // a single frame is returned divided by the window
        let spec = ComplexSpectrogram {
            frames: 1,
            bins: 257,
            values: half,
        };
        let y = stft.synthesize(&spec).unwrap();
        let win = hamming(400);
        for ((a, b), w) in y.iter().zip(&x).zip(&win) {
            assert!((a * w - b).abs() < 1e-12);
        }
    }

    #[test]
    fn analysis_matches_direct_dft() {
        let cfg = FrontendConfig::default();
        let stft = Stft::new(&cfg).unwrap();
        let x = sine(437.0, 400);
        let spec = stft.analyze(&x).unwrap();
        let win = hamming(400);
        for k in [0, 14, 100, 256] {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                acc += Complex64::from_polar(v * win[n], -2.0 * PI * (k * n) as f64 / 512.0);
            }
            assert!((acc - spec.values[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn sine_reconstruction_converges() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(sine(440.0, 16000), 16000);
        let mag = exact_magnitude(&w, &cfg).unwrap();
        let r = griffin_lim(&mag, &cfg, 100, 3).unwrap();
        assert_eq!(r.convergence.len(), 100);
        assert!(r.convergence[0] > 0.15);
        assert!(r.final_convergence() < 0.12, "{}", r.final_convergence());
        for pair in r.convergence.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "{pair:?}");
        }
        assert_eq!(r, griffin_lim(&mag, &cfg, 100, 3).unwrap());
        assert_ne!(r.waveform, griffin_lim(&mag, &cfg, 100, 4).unwrap().waveform);
    }

    #[test]
    fn zero_magnitude() {
        let cfg = FrontendConfig::default();
        let mag = MagnitudeSpectrogram::new(crate::Tensor::zeros(&[3, 257])).unwrap();
        let r = griffin_lim(&mag, &cfg, 10, 1).unwrap();
        assert_eq!(r.waveform.len(), 720);
        assert!(r.waveform.samples.iter().all(|&s| s == 0.0));
        assert_eq!(r.final_convergence(), 0.0);
    }
}
