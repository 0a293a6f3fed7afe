//! Convolutional CTC acoustic model: specs, weights, and a forward pass that
//! records the post-ReLU activation of every layer on a [`Graph`].

mod spec;
pub mod train;
mod weights;

use rand::{Rng, SeedableRng};

pub use spec::{LayerKind, LayerShape, LayerSpec, NetworkSpec};
pub use weights::{ArrayEntry, BatchNorm, LayerWeights, Manifest, WeightFile, WeightStore, MAGIC};

use crate::autodiff::{Graph, NodeId, Precision, Tensor};
use crate::error::{Error, Result};
use crate::frontend::FeatureTensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Stored batch-norm statistics, no dropout.
    Inference,
    /// Batch-norm statistics of the current input; dropout masks drawn from
    /// `seed` when `dropout` is set.
    Training { seed: u64, dropout: bool },
}

/// Post-ReLU activations per layer, `T' × F' × D` (fully connected layers and
/// the CTC head as `T' × 1 × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub layers: Vec<(String, Tensor)>,
}

impl ActivationSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }
}

/// Per-layer graph nodes of the trainable parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub kernel: NodeId,
    pub bias: NodeId,
    pub scale: Option<NodeId>,
    pub shift: Option<NodeId>,
}

/// Network parameters placed on a graph, reduced to `conv/matmul → affine`.
#[derive(Clone, Debug)]
pub struct BoundParams {
    kernels: Vec<NodeId>,
    affine: Vec<(NodeId, NodeId)>,
    /// batch-norm scale and shift, used with batch statistics in training
    norm: Vec<Option<(NodeId, NodeId)>>,
    /// present when bound as variables
    pub vars: Option<Vec<LayerVars>>,
}

/// Nodes produced for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    /// conv or matmul output before normalization
    pub pre_norm: NodeId,
    /// post-ReLU, post-pooling activation (logits for the output layer)
    pub activation: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub weights: WeightStore,
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: WeightStore) -> Result<Self> {
        spec.validate()?;
        weights.check_against(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn random(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let weights = WeightStore::init_random(&spec, seed)?;
        Self::new(spec, weights)
    }

    /// Places the weights on `g` as constants, or as variables when
    /// `trainable` (for gradient-based training).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams> {
        let mut kernels = Vec::new();
        let mut affine = Vec::new();
        let mut norm = Vec::new();
        let mut vars = Vec::new();
        for w in &self.weights.layers {
            let c = w.bias.len();
            if trainable {
                let kernel = g.variable(w.kernel.clone());
                let bias = g.variable(w.bias.clone());
                let (a, b, scale, shift) = match &w.norm {
                    Some(n) => {
                        let scale = g.variable(n.scale.clone());
                        let shift = g.variable(n.shift.clone());
                        let inv = g.constant(n.variance.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()));
                        let mean = g.constant(n.mean.clone());
                        let a = g.mul(scale, inv)?;
                        let centered = g.sub(bias, mean)?;
                        let scaled = g.mul(centered, a)?;
                        let b = g.add(shift, scaled)?;
                        (a, b, Some(scale), Some(shift))
                    }
                    None => (g.constant(Tensor::ones(&[c])), bias, None, None),
                };
                kernels.push(kernel);
                affine.push((a, b));
                norm.push(scale.zip(shift));
                vars.push(LayerVars {
                    kernel,
                    bias,
                    scale,
                    shift,
                });
            } else {
                kernels.push(g.constant(w.kernel.clone()));
                let (a, b) = effective_affine(w);
                affine.push((g.constant(a), g.constant(b)));
                norm.push(
                    w.norm
                        .as_ref()
                        .map(|n| (g.constant(n.scale.clone()), g.constant(n.shift.clone()))),
                );
            }
        }
        Ok(BoundParams {
            kernels,
            affine,
            norm,
            vars: trainable.then_some(vars),
        })
    }

    /// Runs layers `0..=upto` on a `T × F × 3` features node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        features: NodeId,
        upto: usize,
        mode: Mode,
    ) -> Result<Vec<LayerNodes>> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[1] != self.spec.input_freq || shape[2] != self.spec.input_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "features {shape:?}, network expects [T, {}, {}]",
                    self.spec.input_freq, self.spec.input_channels
                ),
            });
        }
        let shapes = self.spec.layer_shapes(shape[0])?;
        let training = matches!(mode, Mode::Training { .. });
        let mut rng = match mode {
            Mode::Training { seed, dropout: true } => Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let mut x = features;
        let mut out = Vec::with_capacity(upto + 1);
        for (i, l) in self.spec.layers.iter().enumerate().take(upto + 1) {
            let normalize = |g: &mut Graph, z: NodeId| -> Result<NodeId> {
                match params.norm[i] {
                    Some((scale, shift)) if training => batch_norm(g, z, scale, shift),
                    _ => {
                        let (a, b) = params.affine[i];
                        g.channel_affine(z, a, b)
                    }
                }
            };
            let nodes = match l.kind {
                LayerKind::Conv => {
                    let z = g.conv2d(x, params.kernels[i])?;
                    let y = normalize(g, z)?;
                    let r = g.relu(y)?;
                    let p = if l.pool == (1, 1) {
                        r
                    } else {
                        g.maxpool2d(r, l.pool.0, l.pool.1)?
                    };
                    x = dropout(g, p, l.dropout_keep, rng.as_mut())?;
                    LayerNodes {
                        pre_norm: z,
                        activation: p,
                    }
                }
                LayerKind::FullyConnected | LayerKind::Output => {
                    let t = shapes[i].time;
                    let width: usize = g.shape(x).iter().product::<usize>() / t;
                    let flat = g.reshape(x, &[t, width])?;
                    let z = g.matmul(flat, params.kernels[i])?;
                    let y = if l.kind == LayerKind::Output {
                        let (a, b) = params.affine[i];
                        g.channel_affine(z, a, b)?
                    } else {
                        normalize(g, z)?
                    };
                    if l.kind == LayerKind::Output {
                        LayerNodes {
                            pre_norm: z,
                            activation: y,
                        }
                    } else {
                        let r = g.relu(y)?;
                        x = dropout(g, r, l.dropout_keep, rng.as_mut())?;
                        LayerNodes {
                            pre_norm: z,
                            activation: r,
                        }
                    }
                }
            };
            out.push(nodes);
        }
        Ok(out)
    }

    /// Activations of layers up to and including `upto`.
    pub fn forward_collect(&self, features: &FeatureTensor, upto: &str, mode: Mode) -> Result<ActivationSet> {
        let last = self.spec.layer_index(upto)?;
        let mut g = Graph::new(Precision::High);
        let params = self.bind(&mut g, false)?;
        let x = g.constant(features.values.clone());
        let nodes = self.forward_graph(&mut g, &params, x, last, mode)?;
        let shapes = self.spec.layer_shapes(features.frames())?;
        let layers = nodes
            .iter()
            .zip(&self.spec.layers)
            .zip(shapes)
            .map(|((n, l), s)| {
                let v = g.value(n.activation).reshape(&[s.time, s.freq, s.channels])?;
                Ok((l.name.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivationSet { layers })
    }

    /// `T' × V` output logits.
    pub fn logits(&self, features: &FeatureTensor) -> Result<Tensor> {
        let last = self.spec.layers.len() - 1;
        let mut g = Graph::new(Precision::High);
        let params = self.bind(&mut g, false)?;
        let x = g.constant(features.values.clone());
        let nodes = self.forward_graph(&mut g, &params, x, last, Mode::Inference)?;
        Ok(g.value(nodes[last].activation).clone())
    }
}

/// Normalizes `z` (channels last) with its own per-channel mean and variance
/// over all other axes. The layer bias cancels, so it is not an input.
fn batch_norm(g: &mut Graph, z: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
    let shape = g.shape(z).to_vec();
    let axes: Vec<usize> = (0..shape.len() - 1).collect();
    let c = shape[shape.len() - 1];
    let ones = g.constant(Tensor::ones(&[c]));
    let mean = g.mean_axes(z, &axes)?;
    let neg = g.mul_scalar(mean, -1.0)?;
    let centered = g.channel_affine(z, ones, neg)?;
    let sq = g.square(centered)?;
    let var = g.mean_axes(sq, &axes)?;
    let padded = g.add_scalar(var, BATCH_NORM_EPS)?;
    let std = g.sqrt(padded)?;
    let inv = g.div(ones, std)?;
    let a = g.mul(scale, inv)?;
    g.channel_affine(centered, a, shift)
}

/// `(a, b)` with `y = conv(x) · a + b` folding bias and frozen batch norm.
fn effective_affine(w: &LayerWeights) -> (Tensor, Tensor) {
    match &w.norm {
        Some(n) => {
            let a: Vec<f64> = n
                .scale
                .data()
                .iter()
                .zip(n.variance.data())
                .map(|(s, v)| s * (1.0 / (v + BATCH_NORM_EPS).sqrt()))
                .collect();
            let b = (0..a.len())
                .map(|c| n.shift.data()[c] + (w.bias.data()[c] - n.mean.data()[c]) * a[c])
                .collect();
            (Tensor::vector(a), Tensor::vector(b))
        }
        None => (Tensor::ones(&[w.bias.len()]), w.bias.clone()),
    }
}

fn dropout(g: &mut Graph, x: NodeId, keep: f64, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if keep >= 1.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}
