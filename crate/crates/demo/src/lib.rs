//! Browser demo: toy utterances, their log filterbank features, layer Gram
//! matrices of the toy network and Griffin-Lim convergence on a sine.
//!
//! Every export is a thin wrapper around a plain function so the same code
//! runs in native tests.

use std::cell::RefCell;
use std::f64::consts::PI;

use speechstyle::frontend::{FeatureTensor, Frontend, FrontendConfig, Waveform};
use speechstyle::losses::gram_matrix_image;
use speechstyle::net::train::calibrate_batch_norm;
use speechstyle::net::{Mode, Network, NetworkSpec};
use speechstyle::phase::{exact_magnitude, griffin_lim};
use speechstyle::speaker::{toy_corpus, ToyCorpus};
use wasm_bindgen::prelude::*;

const CORPUS_SEED: u64 = 1;
const NET_SEED: u64 = 0;
const SAMPLE_RATE: u32 = 16000;

struct Model {
    corpus: ToyCorpus,
    frontend: Frontend,
    net: Network,
}

thread_local! {
    static MODEL: RefCell<Option<Model>> = const { RefCell::new(None) };
}

fn build_model() -> Result<Model, String> {
    let corpus = toy_corpus(3, 2, CORPUS_SEED).map_err(|e| e.to_string())?;
    let frontend = Frontend::new(FrontendConfig::toy()).map_err(|e| e.to_string())?;
    let mut net = Network::random(NetworkSpec::toy(4), NET_SEED).map_err(|e| e.to_string())?;
    let feats = corpus
        .utterances
        .iter()
        .map(|u| frontend.waveform_features(&u.waveform))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&FeatureTensor> = feats.iter().collect();
    calibrate_batch_norm(&mut net, &refs).map_err(|e| e.to_string())?;
    Ok(Model { corpus, frontend, net })
}

fn with_model<T>(f: impl FnOnce(&Model) -> Result<T, String>) -> Result<T, String> {
    MODEL.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.is_none() {
            *slot = Some(build_model()?);
        }
        f(slot.as_ref().expect("built above"))
    })
}

fn wave(samples: &[f32]) -> Waveform {
    Waveform::new(samples.iter().map(|&s| s as f64).collect(), SAMPLE_RATE)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Samples of toy utterance `index` (speakers interleave: 0, 1, 2, 0, ...).
pub fn utterance_samples(index: usize) -> Result<Vec<f32>, String> {
    with_model(|m| {
        let u = m
            .corpus
            .utterances
            .get(index)
            .ok_or_else(|| format!("utterance {index} out of range 0..{}", m.corpus.utterances.len()))?;
        Ok(to_f32(&u.waveform.samples))
    })
}

/// Static log filterbank channels, `frames × 20` row-major.
pub fn log_filterbank(samples: &[f32]) -> Result<Vec<f32>, String> {
    with_model(|m| {
        let f = m
            .frontend
            .waveform_features(&wave(samples))
            .map_err(|e| e.to_string())?;
        Ok(f.values.data().chunks(3).map(|v| v[0] as f32).collect())
    })
}

/// `D × D` Gram matrix of one toy-network layer, scaled to peak 1.
pub fn layer_gram(samples: &[f32], layer: &str) -> Result<Vec<f32>, String> {
    with_model(|m| {
        let f = m
            .frontend
            .waveform_features(&wave(samples))
            .map_err(|e| e.to_string())?;
        let acts = m
            .net
            .forward_collect(&f, layer, Mode::Inference)
            .map_err(|e| e.to_string())?;
        let g = gram_matrix_image(acts.get(layer).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let peak = g.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        Ok(g.data().iter().map(|&v| (v * scale) as f32).collect())
    })
}

/// Spectral convergence after each Griffin-Lim iteration, starting from the
/// exact magnitude of a one-second sine.
pub fn sine_convergence(freq_hz: f64, iterations: usize, seed: u64) -> Result<Vec<f32>, String> {
    if !(freq_hz > 0.0 && freq_hz < SAMPLE_RATE as f64 / 2.0) {
        return Err(format!("frequency {freq_hz} Hz outside (0, 8000)"));
    }
    let cfg = FrontendConfig::default();
    let samples = (0..SAMPLE_RATE)
        .map(|n| 0.5 * (2.0 * PI * freq_hz * n as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    let mag = exact_magnitude(&Waveform::new(samples, SAMPLE_RATE), &cfg).map_err(|e| e.to_string())?;
    let r = griffin_lim(&mag, &cfg, iterations, seed).map_err(|e| e.to_string())?;
    Ok(to_f32(&r.convergence))
}

#[wasm_bindgen]
pub fn utterance_count() -> usize {
    with_model(|m| Ok(m.corpus.utterances.len())).unwrap_or(0)
}

#[wasm_bindgen]
pub fn filterbank_channels() -> usize {
    FrontendConfig::toy().num_channels
}

#[wasm_bindgen]
pub fn toy_utterance(index: usize) -> Result<Vec<f32>, JsError> {
    utterance_samples(index).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn features(samples: &[f32]) -> Result<Vec<f32>, JsError> {
    log_filterbank(samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gram(samples: &[f32], layer: &str) -> Result<Vec<f32>, JsError> {
    layer_gram(samples, layer).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn griffin_lim_curve(freq_hz: f64, iterations: usize, seed: u64) -> Result<Vec<f32>, JsError> {
    sine_convergence(freq_hz, iterations, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterances_are_available() {
        for i in 0..utterance_count() {
            let s = utterance_samples(i).unwrap();
            assert!(s.len() >= SAMPLE_RATE as usize);
        }
        assert!(utterance_samples(utterance_count()).is_err());
    }

    #[test]
    fn filterbank_image_shape() {
        let s = utterance_samples(0).unwrap();
        let img = log_filterbank(&s).unwrap();
        let frames = (s.len() - 400) / 160 + 1;
        assert_eq!(img.len(), frames * filterbank_channels());
    }

    #[test]
    fn gram_is_square_and_symmetric() {
        let s = utterance_samples(1).unwrap();
        for (layer, d) in [("C0", 8), ("C3", 16), ("FC0", 32)] {
            let g = layer_gram(&s, layer).unwrap();
            assert_eq!(g.len(), d * d, "{layer}");
            for i in 0..d {
                for j in 0..d {
                    assert_eq!(g[i * d + j], g[j * d + i]);
                }
            }
            assert!(g.iter().any(|&v| v == 1.0 || v == -1.0));
        }
        assert!(layer_gram(&s, "C9").is_err());
    }

    #[test]
    fn convergence_curve() {
        let c = sine_convergence(440.0, 10, 0).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c[9] <= c[0]);
        assert!(sine_convergence(9000.0, 10, 0).is_err());
    }
}
