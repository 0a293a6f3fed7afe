//! 16-bit mono PCM WAV at 16 kHz.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::frontend::Waveform;

pub const WAV_SAMPLE_RATE: u32 = 16000;
const SCALE: f64 = 32768.0;

fn check_spec(spec: &WavSpec) -> Result<()> {
    if spec.sample_format != SampleFormat::Int {
        return Err(Error::UnsupportedAudio {
            field: "sample format",
            found: "float".into(),
            expected: "integer PCM".into(),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio {
            field: "bits per sample",
            found: spec.bits_per_sample.to_string(),
            expected: "16".into(),
        });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio {
            field: "channels",
            found: spec.channels.to_string(),
            expected: "1 (mono)".into(),
        });
    }
    if spec.sample_rate != WAV_SAMPLE_RATE {
        return Err(Error::UnsupportedAudio {
            field: "sample rate",
            found: format!("{} Hz", spec.sample_rate),
            expected: format!("{WAV_SAMPLE_RATE} Hz"),
        });
    }
    Ok(())
}

/// Samples scaled to `[-1, 1)` by `1/32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path)?;
    check_spec(&reader.spec())?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, WAV_SAMPLE_RATE))
}

/// Rounds to the nearest 16-bit code, saturating at the range ends.
pub fn quantize(sample: f64) -> i16 {
    (sample * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    check_spec(&spec)?;
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("waveform contains non-finite samples".into()));
    }
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1000).map(|n| (n as f64 * 0.013).sin() * 0.9).collect(), 16000);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.len(), w.len());
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn saturation() {
        assert_eq!(quantize(1.5), i16::MAX);
        assert_eq!(quantize(-1.0), i16::MIN);
        assert_eq!(quantize(-2.0), i16::MIN);
        assert_eq!(quantize(0.5 / 32768.0), 1);
    }

    fn write_with(path: &Path, spec: WavSpec) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for _ in 0..10 * spec.channels {
            match spec.sample_format {
                SampleFormat::Int if spec.bits_per_sample == 16 => w.write_sample(0i16).unwrap(),
                SampleFormat::Int => w.write_sample(0i32).unwrap(),
                SampleFormat::Float => w.write_sample(0f32).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn rejects_each_unsupported_field() {
        let dir = tempfile::tempdir().unwrap();
        let base = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let cases = [
            (WavSpec { channels: 2, ..base }, "channels"),
            (
                WavSpec {
                    sample_rate: 44100,
                    ..base
                },
                "sample rate",
            ),
            (
                WavSpec {
                    bits_per_sample: 24,
                    ..base
                },
                "bits per sample",
            ),
            (
                WavSpec {
                    bits_per_sample: 32,
                    sample_format: SampleFormat::Float,
                    ..base
                },
                "sample format",
            ),
        ];
        for (i, (spec, field)) in cases.into_iter().enumerate() {
            let p = dir.path().join(format!("{i}.wav"));
            write_with(&p, spec);
            match read_wav(&p) {
                Err(Error::UnsupportedAudio { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
        let msg = read_wav(&dir.path().join("1.wav")).unwrap_err().to_string();
        assert!(msg.contains("44100"), "{msg}");
        assert!(write_wav(&dir.path().join("x.wav"), &Waveform::new(vec![0.0], 8000)).is_err());
    }
}
