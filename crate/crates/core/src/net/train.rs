//! Toy-scale CTC training.
//!
//! Adam trains kernels, biases and the batch-norm affine parameters against
//! the CTC loss, normalizing each utterance with its own batch statistics.
//! Afterwards the stored statistics are recomputed over the whole training
//! set, layer by layer, for inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, Network, BATCH_NORM_EPS};
use crate::autodiff::{Graph, NodeId, Precision, Tensor};
use crate::ctc::{ctc_loss, edit_distance, greedy_decode};
use crate::error::{Error, Result};
use crate::frontend::{FeatureTensor, Frontend};
use crate::optim::{adam_step, AdamConfig, AdamState, TraceRow};
use crate::speaker::ToyUtterance;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub precision: Precision,
    /// apply the layers' dropout during training
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            precision: Precision::High,
            dropout: true,
        }
    }
}

/// Initial Adam rate used for the toy network; the rate anneals to 1e-6
/// over the run.
pub const TOY_LEARNING_RATE: f64 = 3e-3;

impl TrainConfig {
    pub fn toy(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            adam: AdamConfig {
                lr_start: TOY_LEARNING_RATE,
                anneal_steps: steps,
                ..AdamConfig::default()
            },
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureTensor,
    pub labels: Vec<usize>,
}

pub fn toy_examples(frontend: &Frontend, utterances: &[ToyUtterance]) -> Result<Vec<Example>> {
    utterances
        .iter()
        .map(|u| {
            Ok(Example {
                id: u.id.clone(),
                features: frontend.waveform_features(&u.waveform)?,
                labels: u.labels.clone(),
            })
        })
        .collect()
}

/// Sets each layer's batch-norm mean and variance to the statistics of its
/// pre-normalization outputs over `inputs`, with the layers below already
/// calibrated. Scale and shift are left untouched.
pub fn calibrate_batch_norm(net: &mut Network, inputs: &[&FeatureTensor]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("batch-norm calibration needs data".into()));
    }
    for i in 0..net.spec.layers.len() {
        if net.weights.layers[i].norm.is_none() {
            continue;
        }
        let c = net.spec.layers[i].out_channels;
        let (mut sum, mut sq, mut count) = (vec![0.0; c], vec![0.0; c], 0usize);
        for f in inputs {
            let mut g = Graph::new(Precision::High);
            let params = net.bind(&mut g, false)?;
            let x = g.constant(f.values.clone());
            let nodes = net.forward_graph(&mut g, &params, x, i, Mode::Inference)?;
            let z = g.value(nodes[i].pre_norm);
            for row in z.data().chunks(c) {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            count += z.len() / c;
        }
        let w = &mut net.weights.layers[i];
        let norm = w.norm.as_mut().expect("checked above");
        for k in 0..c {
            let mean = sum[k] / count as f64;
            let var = (sq[k] / count as f64 - mean * mean).max(0.0);
            norm.mean.data_mut()[k] = mean + w.bias.data()[k];
            norm.variance.data_mut()[k] = var.max(BATCH_NORM_EPS);
        }
    }
    Ok(())
}

/// Trainable tensors in a fixed order: per layer kernel, bias, then batch-norm
/// scale and shift when present.
pub fn trainable_params(net: &Network) -> Vec<Tensor> {
    let mut out = Vec::new();
    for w in &net.weights.layers {
        out.push(w.kernel.clone());
        out.push(w.bias.clone());
        if let Some(n) = &w.norm {
            out.push(n.scale.clone());
            out.push(n.shift.clone());
        }
    }
    out
}

fn set_trainable(net: &mut Network, params: &[Tensor]) {
    let mut it = params.iter();
    for w in &mut net.weights.layers {
        w.kernel = it.next().expect("param count").clone();
        w.bias = it.next().expect("param count").clone();
        if let Some(n) = &mut w.norm {
            n.scale = it.next().expect("param count").clone();
            n.shift = it.next().expect("param count").clone();
        }
    }
}

/// CTC loss of one example and its gradient with respect to
/// [`trainable_params`].
pub fn example_gradient(net: &Network, ex: &Example, mode: Mode, precision: Precision) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(precision);
    let params = net.bind(&mut g, true)?;
    let x = g.constant(ex.features.values.clone());
    let last = net.spec.layers.len() - 1;
    let nodes = net.forward_graph(&mut g, &params, x, last, mode)?;
    let logits = nodes[last].activation;
    let (loss, dlogits) = ctc_loss(g.value(logits), &ex.labels)?;
    let grads = g.backward_seeded(&[(logits, dlogits)])?;
    let vars = params.vars.as_ref().expect("bound as trainable");
    let ids: Vec<NodeId> = vars
        .iter()
        .flat_map(|v| [Some(v.kernel), Some(v.bias), v.scale, v.shift])
        .flatten()
        .collect();
    Ok((loss, ids.into_iter().map(|id| grads.get(id)).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// mean minibatch CTC loss and gradient norm per step
    pub trace: Vec<TraceRow>,
}

/// Adam on minibatches drawn without replacement per epoch, followed by
/// [`calibrate_batch_norm`] on the training features. `progress` is called
/// after every step with the step index and loss.
pub fn train_ctc(
    net: &mut Network,
    data: &[Example],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.adam.validate()?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "training needs data and a positive batch size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = trainable_params(net);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut sum: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        for b in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let mode = Mode::Training {
                seed: cfg.seed ^ ((step * cfg.batch_size + b) as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
                dropout: cfg.dropout,
            };
            let (l, grads) = example_gradient(net, &data[idx], mode, cfg.precision)?;
            loss += l;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let mut grads = sum.expect("batch is non-empty");
        grads
            .iter_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        loss *= scale;
        let grad_norm = grads
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite CTC loss or gradient at step {step}"
            )));
        }
        adam_step(&mut params, &grads, &mut state, &cfg.adam, step)?;
        set_trainable(net, &params);
        trace.push(TraceRow {
            iteration: step,
            loss,
            grad_norm,
        });
        progress(step, loss);
    }
    let inputs: Vec<&FeatureTensor> = data.iter().map(|e| &e.features).collect();
    calibrate_batch_norm(net, &inputs)?;
    Ok(TrainReport { trace })
}

/// Total greedy-decode edit distance over total reference length.
pub fn symbol_error_rate(net: &Network, data: &[Example]) -> Result<f64> {
    let (mut errors, mut total) = (0, 0);
    for ex in data {
        let hyp = greedy_decode(&net.logits(&ex.features)?);
        errors += edit_distance(&hyp, &ex.labels);
        total += ex.labels.len();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no reference symbols".into()));
    }
    Ok(errors as f64 / total as f64)
}
