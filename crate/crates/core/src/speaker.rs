//! Gram-feature speaker identification, classical MDS embeddings, and the
//! synthetic toy-speaker corpus.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc::Charset;
use crate::error::{Error, Result};
use crate::frontend::{FeatureTensor, FrontendConfig, Waveform};
use crate::losses::gram_tensor;
use crate::net::{Mode, Network};

/// Pseudo-layer name selecting the input features themselves.
pub const FEATURE_LAYER: &str = "FEAT";

/// Unit-norm concatenation of the per-layer Gram tensors of `layers`, each
/// layer's block normalized to unit norm first so that no layer dominates by
/// scale. [`FEATURE_LAYER`] uses the `T × C × 3` input features directly.
pub fn gram_feature_vector(features: &FeatureTensor, layers: &[String], net: &Network) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers selected".into()));
    }
    let deepest = layers
        .iter()
        .filter(|l| *l != FEATURE_LAYER)
        .map(|l| net.spec.layer_index(l))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max();
    let acts = match deepest {
        Some(d) => Some(net.forward_collect(features, &net.spec.layers[d].name, Mode::Inference)?),
        None => None,
    };
    let mut out = Vec::new();
    for l in layers {
        let a = if l == FEATURE_LAYER {
            &features.values
        } else {
            acts.as_ref().expect("network layers requested").get(l)?
        };
        let g = gram_tensor(a)?;
        out.extend(normalized(g.matrix.data()));
    }
    Ok(normalized(&out))
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 1-NN label under Euclidean distance; ties go to the lowest index.
pub fn nn_classify(train: &[(usize, Vec<f64>)], query: &[f64]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (label, v) in train {
        if v.len() != query.len() {
            return Err(Error::ShapeMismatch {
                op: "nn_classify",
                detail: format!("training vector of length {} vs query {}", v.len(), query.len()),
            });
        }
        let d = squared_distance(v, query);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, *label));
        }
    }
    best.map(|(_, l)| l)
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))
}

/// Predicted label of every vector classified against all the others.
pub fn leave_one_out(data: &[(usize, Vec<f64>)]) -> Result<Vec<usize>> {
    (0..data.len())
        .map(|i| {
            let rest: Vec<(usize, Vec<f64>)> = data
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, d)| d.clone())
                .collect();
            nn_classify(&rest, &data[i].1)
        })
        .collect()
}

pub fn accuracy<L: PartialEq>(truth: &[L], predicted: &[L]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// `id,true_label,predicted_label` rows.
pub fn evaluation_csv<L: std::fmt::Display>(ids: &[String], truth: &[L], predicted: &[L]) -> String {
    let mut s = String::from("utterance,true_label,predicted_label\n");
    for ((id, t), p) in ids.iter().zip(truth).zip(predicted) {
        let _ = writeln!(s, "{id},{t},{p}");
    }
    s
}

pub fn coordinates_csv(ids: &[String], coords: &[[f64; 2]]) -> String {
    let mut s = String::from("utterance,x,y\n");
    for (id, c) in ids.iter().zip(coords) {
        let _ = writeln!(s, "{id},{},{}", c[0], c[1]);
    }
    s
}

/// Pairwise Euclidean distances.
pub fn distance_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|a| vectors.iter().map(|b| squared_distance(a, b).sqrt()).collect())
        .collect()
}

pub const MDS_TOLERANCE: f64 = 1e-10;
const MDS_MAX_ITERS: usize = 200_000;

/// Classical (Torgerson) MDS into two dimensions: double-centre the squared
/// distances and take the top two eigenpairs by power iteration with
/// deflation. Negative eigenvalues are clamped to zero.
pub fn classical_mds(dist: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = dist.len();
    let scale = dist.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, row) in dist.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidArgument("distance matrix must be square".into()));
        }
        if row[i] != 0.0 {
            return Err(Error::InvalidArgument(format!("nonzero diagonal at {i}")));
        }
        for j in 0..i {
            if (row[j] - dist[j][i]).abs() > 1e-12 * scale.max(1.0) || !row[j].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "distance matrix asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let sq: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|d| d * d).collect()).collect();
    let row_mean: Vec<f64> = sq.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let all_mean = row_mean.iter().sum::<f64>() / n as f64;
    let mut b: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| -0.5 * (sq[i][j] - row_mean[i] - row_mean[j] + all_mean))
                .collect()
        })
        .collect();
    // shift so the algebraically largest eigenvalue also dominates in modulus
    let shift = b.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut coords = vec![[0.0; 2]; n];
    if shift == 0.0 {
        return Ok(coords);
    }
    for axis in 0..2 {
        let (lambda, v) = top_eigenpair(&b, shift);
        let lambda = lambda.max(0.0);
        for i in 0..n {
            coords[i][axis] = v[i] * lambda.sqrt();
        }
        for i in 0..n {
            for j in 0..n {
                b[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    Ok(coords)
}

fn top_eigenpair(b: &[Vec<f64>], shift: f64) -> (f64, Vec<f64>) {
    let n = b.len();
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| b[i].iter().zip(v).map(|(x, y)| x * y).sum::<f64>() + shift * v[i])
            .collect()
    };
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut mu = 0.0;
    for _ in 0..MDS_MAX_ITERS {
        let w = apply(&v);
        mu = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        let residual = w.iter().zip(&v).map(|(a, b)| (a - mu * b).powi(2)).sum::<f64>().sqrt();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v = w.iter().map(|x| x / norm).collect();
        if residual <= MDS_TOLERANCE * shift {
            break;
        }
    }
    (mu - shift, v)
}

/// A synthetic speaker: fixed pitch and spectral envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeaker {
    pub f0_hz: f64,
    /// multiplies every formant frequency
    pub formant_scale: f64,
    /// spectral slope in dB per octave above 500 Hz
    pub tilt_db_per_octave: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub speaker: usize,
    pub waveform: Waveform,
    /// symbols 1..=4 of the voiced and fricative segments, in order
    pub labels: Vec<usize>,
    /// `(start, end, symbol)` in samples; symbol 0 marks silence
    pub segments: Vec<(usize, usize, usize)>,
}

impl ToyUtterance {
    /// Frames whose analysis window lies entirely inside a silent segment.
    pub fn silent_frames(&self, cfg: &FrontendConfig) -> Vec<usize> {
        let frames = cfg.num_frames(self.waveform.len()).unwrap_or(0);
        (0..frames)
            .filter(|&t| {
                let (start, end) = (t * cfg.hop_samples, t * cfg.hop_samples + cfg.window_len_samples);
                self.segments
                    .iter()
                    .any(|&(a, b, sym)| sym == 0 && a <= start && end <= b)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub speakers: Vec<ToySpeaker>,
    pub utterances: Vec<ToyUtterance>,
    seed: u64,
}

pub const TOY_SAMPLE_RATE: u32 = 16000;

/// Segment inventory: three vowels by formant frequencies and one fricative.
const VOWELS: [[f64; 3]; 3] = [[730.0, 1090.0, 2440.0], [270.0, 2290.0, 3010.0], [300.0, 870.0, 2240.0]];
const FRICATIVE: usize = 4;

pub fn toy_charset() -> Charset {
    Charset {
        symbols: ["_", "a", "i", "u", "s"].iter().map(|s| s.to_string()).collect(),
    }
}

/// Draws one value from each of `n` equal slices of `[lo, hi)` and shuffles.
fn stratified(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let w = (hi - lo) / n as f64;
    let mut v: Vec<f64> = (0..n).map(|i| lo + w * (i as f64 + rng.gen_range(0.1..0.9))).collect();
    v.shuffle(rng);
    v
}

/// Corpus of `num_speakers × utts_per_speaker` utterances of 1–2 s.
pub fn toy_corpus(num_speakers: usize, utts_per_speaker: usize, seed: u64) -> Result<ToyCorpus> {
    if num_speakers == 0 {
        return Err(Error::InvalidArgument("need at least one speaker".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = stratified(&mut rng, num_speakers, 90.0, 250.0);
    let scale = stratified(&mut rng, num_speakers, 0.85, 1.2);
    let speakers = (0..num_speakers)
        .map(|i| ToySpeaker {
            f0_hz: f0[i],
            formant_scale: scale[i],
            tilt_db_per_octave: rng.gen_range(-9.0..-3.0),
        })
        .collect();
    let mut corpus = ToyCorpus {
        speakers,
        utterances: Vec::new(),
        seed,
    };
    corpus.utterances = corpus.more_utterances(utts_per_speaker, 0)?;
    Ok(corpus)
}

impl ToyCorpus {
    /// Fresh utterances of the same speakers from an independent stream.
    pub fn more_utterances(&self, per_speaker: usize, stream: u64) -> Result<Vec<ToyUtterance>> {
        let mut out = Vec::with_capacity(per_speaker * self.speakers.len());
        for k in 0..per_speaker {
            for (s, spk) in self.speakers.iter().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.seed ^ (stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                rng.set_stream((k * self.speakers.len() + s) as u64);
                let mut u = synthesize_utterance(spk, &mut rng)?;
                u.speaker = s;
                u.id = if stream == 0 {
                    format!("spk{s}_utt{k:02}")
                } else {
                    format!("spk{s}_x{stream}_utt{k:02}")
                };
                out.push(u);
            }
        }
        Ok(out)
    }

    pub fn by_speaker(&self, speaker: usize) -> impl Iterator<Item = &ToyUtterance> {
        self.utterances.iter().filter(move |u| u.speaker == speaker)
    }
}

fn ms(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> usize {
    (rng.gen_range(lo..hi) * TOY_SAMPLE_RATE as f64 / 1000.0) as usize
}

fn synthesize_utterance(spk: &ToySpeaker, rng: &mut ChaCha8Rng) -> Result<ToyUtterance> {
    let total = ms(rng, 1000.0, 2000.0);
    let gain = 10f64.powf(rng.gen_range(-3.0..3.0) / 20.0);
    let f0 = spk.f0_hz * rng.gen_range(0.97..1.03);
    let noise = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut samples: Vec<f64> = (0..total).map(|_| noise.sample(rng)).collect();
    let mut segments = Vec::new();
    let mut labels = Vec::new();
    let mut pos = ms(rng, 40.0, 120.0);
    segments.push((0, pos, 0));
    loop {
        let len = ms(rng, 120.0, 250.0);
        let gap = ms(rng, 40.0, 120.0);
        if pos + len + gap > total {
            break;
        }
        let symbol = rng.gen_range(1..=4);
        let seg = if symbol == FRICATIVE {
            fricative(spk, len, rng)
        } else {
            vowel(spk, f0, &VOWELS[symbol - 1], len, rng)
        };
        let ramp = (0.01 * TOY_SAMPLE_RATE as f64) as usize;
        for (i, v) in seg.iter().enumerate() {
            let edge = i.min(len - 1 - i);
            let env = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            samples[pos + i] += gain * env * v;
        }
        segments.push((pos, pos + len, symbol));
        segments.push((pos + len, pos + len + gap, 0));
        labels.push(symbol);
        pos += len + gap;
    }
    if pos < total {
        segments.push((pos, total, 0));
    }
    if labels.is_empty() {
        return Err(Error::Numerical("toy utterance without segments".into()));
    }
    Ok(ToyUtterance {
        id: String::new(),
        speaker: 0,
        waveform: Waveform::new(samples, TOY_SAMPLE_RATE),
        labels,
        segments,
    })
}

fn envelope(spk: &ToySpeaker, formants: &[f64], f: f64) -> f64 {
    let bandwidth = [90.0, 110.0, 160.0];
    let peaks: f64 = formants
        .iter()
        .zip(bandwidth)
        .zip([1.0, 0.7, 0.4])
        .map(|((&fc, bw), g)| {
            let fc = fc * spk.formant_scale;
            g * (-(f - fc).powi(2) / (2.0 * bw * bw)).exp()
        })
        .sum();
    let octaves = (f.max(500.0) / 500.0).log2();
    (peaks + 0.02) * 10f64.powf(spk.tilt_db_per_octave * octaves / 20.0)
}

fn rms_normalized(mut v: Vec<f64>, level: f64) -> Vec<f64> {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x *= level / rms);
    }
    v
}

fn vowel(spk: &ToySpeaker, f0: f64, formants: &[f64; 3], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = TOY_SAMPLE_RATE as f64;
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < 7800.0)
        .map(|f| (f, envelope(spk, formants, f), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let v = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            harmonics.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect();
    rms_normalized(v, rng.gen_range(0.08..0.12))
}

fn fricative(spk: &ToySpeaker, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = TOY_SAMPLE_RATE as f64;
    let (lo, hi) = (4000.0 * spk.formant_scale, 7000.0f64.min(6500.0 * spk.formant_scale));
    let comps: Vec<(f64, f64)> = (0..80)
        .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let v = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            comps.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect();
    rms_normalized(v, rng.gen_range(0.03..0.05))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_rules() {
        let train = vec![(3, vec![0.0, 1.0]), (5, vec![1.0, 0.0])];
        assert_eq!(nn_classify(&train, &[1.0, 0.0]).unwrap(), 5);
        assert_eq!(nn_classify(&train, &[0.0, 1.0]).unwrap(), 3);
        // equidistant: lowest index wins
        assert_eq!(nn_classify(&train, &[0.5, 0.5]).unwrap(), 3);
        assert!(nn_classify(&[], &[1.0]).is_err());
    }

    #[test]
    fn separable_classes_loo() {
        let mut data = Vec::new();
        for c in 0..3 {
            for k in 0..5 {
                let mut v = vec![0.0; 3];
                v[c] = 1.0;
                v[(c + 1) % 3] = 0.05 * k as f64;
                data.push((c, normalized(&v)));
            }
        }
        let pred = leave_one_out(&data).unwrap();
        let truth: Vec<usize> = data.iter().map(|d| d.0).collect();
        assert_eq!(accuracy(&truth, &pred), 1.0);
    }

    fn reproduces(coords: &[[f64; 2]], dist: &[Vec<f64>]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..dist.len() {
            for j in 0..dist.len() {
                let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
                num += (d - dist[i][j]).powi(2);
                den += dist[i][j].powi(2);
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn mds_triangle_and_line() {
        let tri = vec![vec![0.0, 3.0, 4.0], vec![3.0, 0.0, 5.0], vec![4.0, 5.0, 0.0]];
        assert!(reproduces(&classical_mds(&tri).unwrap(), &tri) < 1e-6);
        let pts = [0.0f64, 1.0, 2.5, 4.0];
        let line: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| (a - b).abs()).collect())
            .collect();
        let c = classical_mds(&line).unwrap();
        assert!(c.iter().all(|p| p[1].abs() < 1e-6));
        assert!(reproduces(&c, &line) < 1e-6);
        let zero = vec![vec![0.0; 3]; 3];
        assert!(classical_mds(&zero).unwrap().iter().all(|p| p == &[0.0, 0.0]));
        let asym = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        assert!(classical_mds(&asym).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let a = toy_corpus(3, 2, 11).unwrap();
        assert_eq!(a, toy_corpus(3, 2, 11).unwrap());
        assert_ne!(
            a.utterances[0].waveform,
            toy_corpus(3, 2, 12).unwrap().utterances[0].waveform
        );
        let f0: Vec<f64> = a.speakers.iter().map(|s| s.f0_hz).collect();
        assert!(f0.iter().all(|f| (90.0..250.0).contains(f)));
        for i in 0..3 {
            for j in 0..i {
                assert_ne!(f0[i], f0[j]);
            }
        }
        for u in &a.utterances {
            let d = u.waveform.duration_s();
            assert!((1.0..=2.0).contains(&d), "{d}");
            assert!(!u.labels.is_empty() && u.labels.iter().all(|&l| (1..=4).contains(&l)));
            assert!(u.waveform.peak() < 1.0);
        }
        let extra = a.more_utterances(1, 1).unwrap();
        assert_eq!(extra.len(), 3);
        assert_ne!(extra[0].waveform, a.utterances[0].waveform);
    }

    #[test]
    fn silent_frames_lie_in_silence() {
        let cfg = FrontendConfig::toy();
        let u = &toy_corpus(1, 1, 3).unwrap().utterances[0];
        let silent = u.silent_frames(&cfg);
        assert!(!silent.is_empty());
        let frames = cfg.num_frames(u.waveform.len()).unwrap();
        assert!(silent.len() < frames);
        for &t in &silent {
            let window = &u.waveform.samples[t * cfg.hop_samples..t * cfg.hop_samples + cfg.window_len_samples];
            let voiced = &u.waveform.samples[u.segments.iter().find(|s| s.2 != 0).map(|s| s.0..s.1).unwrap()];
            let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
            assert!(rms(window) < rms(voiced));
        }
    }
}
