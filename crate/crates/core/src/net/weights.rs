//! Layer parameters and the `MGW1` weight container.
//!
//! Layout: the 4 magic bytes `MGW1`, a little-endian u64 manifest length, the
//! UTF-8 JSON manifest, then every array as little-endian f32 values,
//! row-major, concatenated in manifest order. Manifest offsets and lengths
//! are in bytes relative to the start of the blob.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, NetworkSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;

pub const MAGIC: &[u8; 4] = b"MGW1";

/// Frozen batch-norm statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub mean: Tensor,
    pub variance: Tensor,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            variance: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
    /// absent on the output layer
    pub norm: Option<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub layers: Vec<LayerWeights>,
}

impl WeightStore {
    /// Gaussian kernels with variance `2 / fan_in`, zero biases and identity
    /// batch norm.
    pub fn init_random(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .kernel_shapes()
            .into_iter()
            .zip(&spec.layers)
            .map(|(shape, l)| {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                LayerWeights {
                    kernel: Tensor::new(shape, data).expect("shape"),
                    bias: Tensor::zeros(&[l.out_channels]),
                    norm: (l.kind != LayerKind::Output).then(|| BatchNorm::identity(l.out_channels)),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .kernel_shapes()
            .into_iter()
            .zip(&spec.layers)
            .map(|(shape, l)| LayerWeights {
                kernel: Tensor::zeros(&shape),
                bias: Tensor::zeros(&[l.out_channels]),
                norm: (l.kind != LayerKind::Output).then(|| BatchNorm::identity(l.out_channels)),
            })
            .collect();
        Self { layers }
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.kernel_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                op: "weights",
                detail: format!("{} layers in store, {} in spec", self.layers.len(), shapes.len()),
            });
        }
        for ((w, shape), l) in self.layers.iter().zip(shapes).zip(&spec.layers) {
            let c = l.out_channels;
            let ok = w.kernel.shape() == shape.as_slice()
                && w.bias.shape() == [c]
                && match (&w.norm, l.kind) {
                    (None, LayerKind::Output) => true,
                    (Some(n), k) if k != LayerKind::Output => {
                        [&n.scale, &n.shift, &n.mean, &n.variance]
                            .iter()
                            .all(|t| t.shape() == [c])
                            && n.variance.data().iter().all(|&v| v > 0.0)
                    }
                    _ => false,
                };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "weights",
                    detail: format!("layer {} does not match its spec", l.name),
                });
            }
        }
        Ok(())
    }

    /// Every array in a fixed order, with its manifest name.
    pub fn named_arrays<'a>(&'a self, spec: &'a NetworkSpec) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (w, l) in self.layers.iter().zip(&spec.layers) {
            out.push((format!("{}.kernel", l.name), &w.kernel));
            out.push((format!("{}.bias", l.name), &w.bias));
            if let Some(n) = &w.norm {
                out.push((format!("{}.bn_scale", l.name), &n.scale));
                out.push((format!("{}.bn_shift", l.name), &n.shift));
                out.push((format!("{}.bn_mean", l.name), &n.mean));
                out.push((format!("{}.bn_variance", l.name), &n.variance));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frontend: Option<FrontendConfig>,
    pub arrays: Vec<ArrayEntry>,
}

/// A network spec with its weights and (optionally) the front end it was
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub spec: NetworkSpec,
    pub frontend: Option<FrontendConfig>,
    pub weights: WeightStore,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.weights.check_against(&self.spec)?;
        let arrays = self.weights.named_arrays(&self.spec);
        let mut entries = Vec::with_capacity(arrays.len());
        let mut blob = Vec::new();
        for (name, t) in arrays {
            let offset = blob.len() as u64;
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            entries.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            spec: self.spec.clone(),
            frontend: self.frontend.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(12 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::WeightFormat(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fmt("missing MGW1 magic"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let manifest_end = 12usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[12..manifest_end])?;
        manifest.spec.validate()?;
        let blob = &bytes[manifest_end..];
        let mut by_name = std::collections::HashMap::new();
        for e in &manifest.arrays {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
            if e.length as usize != n * 4 || end > blob.len() || start > end {
                return Err(fmt(&format!("array {} has an inconsistent extent", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            by_name.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let mut take = |name: String| {
            by_name
                .remove(&name)
                .ok_or_else(|| fmt(&format!("missing array {name}")))
        };
        let mut layers = Vec::with_capacity(manifest.spec.layers.len());
        for l in &manifest.spec.layers {
            let kernel = take(format!("{}.kernel", l.name))?;
            let bias = take(format!("{}.bias", l.name))?;
            let norm = if l.kind == LayerKind::Output {
                None
            } else {
                Some(BatchNorm {
                    scale: take(format!("{}.bn_scale", l.name))?,
                    shift: take(format!("{}.bn_shift", l.name))?,
                    mean: take(format!("{}.bn_mean", l.name))?,
                    variance: take(format!("{}.bn_variance", l.name))?,
                })
            };
            layers.push(LayerWeights { kernel, bias, norm });
        }
        let weights = WeightStore { layers };
        weights.check_against(&manifest.spec)?;
        Ok(Self {
            spec: manifest.spec,
            frontend: manifest.frontend,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = NetworkSpec::toy(4);
        let a = WeightStore::init_random(&spec, 7).unwrap();
        let b = WeightStore::init_random(&spec, 7).unwrap();
        let c = WeightStore::init_random(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn c0_kernel_variance_matches_fan_in() {
        let spec = NetworkSpec::paper(30);
        let w = WeightStore::init_random(&spec, 3).unwrap();
        let k = &w.layers[0].kernel;
        let n = k.len() as f64;
        let mean = k.sum() / n;
        let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / 75.0;
        assert!((var - expect).abs() < 0.2 * expect, "{var} vs {expect}");
        let bn = w.layers[0].norm.as_ref().unwrap();
        assert_eq!(bn.variance, Tensor::ones(&[128]));
        assert_eq!(w.layers[0].bias, Tensor::zeros(&[128]));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let spec = NetworkSpec::toy(4);
        let file = WeightFile {
            spec: spec.clone(),
            frontend: None,
            weights: WeightStore::init_random(&spec, 1).unwrap(),
        };
        let mut bytes = file.to_bytes().unwrap();
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        bytes[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::WeightFormat(_))));
    }
}
