//! Speech generation by input optimization.
//!
//! Stage 1 optimizes a log-magnitude spectrogram `L` (`mag = exp(L)`) through
//! the spectrogram feature path, Griffin-Lim turns the result into a
//! waveform, and stage 2 refines the waveform samples directly against the
//! same objective. Both stages use L-BFGS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Precision, Tensor};
use crate::error::{Error, Result};
use crate::frontend::{FeatureInput, FeatureTensor, Frontend, FrontendConfig, MagnitudeSpectrogram, Waveform};
use crate::losses::{graph_total_loss, pooled_style_gram, LossSpec, LossTargets, Role};
use crate::net::{LayerKind, Mode, Network};
use crate::optim::{lbfgs_minimize, LbfgsConfig, TraceRow};
use crate::phase::griffin_lim;

pub const OUTPUT_PEAK: f64 = 0.95;
pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 100;
/// standard deviation of the noise initialization in log-magnitude units
pub const NOISE_SIGMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Invert,
    Texture,
    Convert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// Gaussian log-magnitudes at the reference energy level.
    #[default]
    Noise,
    /// Stage 1 starts from the content log-magnitudes.
    ContentSpectrogram,
    /// Stage 1 and Griffin-Lim are skipped; stage 2 starts from the content
    /// waveform.
    ContentWaveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisJob {
    pub task: Task,
    pub content: Option<Waveform>,
    pub styles: Vec<Waveform>,
    pub loss: LossSpec,
    /// output duration for texture jobs; other tasks follow the content
    pub duration_s: Option<f64>,
    pub stage1: LbfgsConfig,
    pub stage2: LbfgsConfig,
    pub griffin_lim_iters: usize,
    pub seed: u64,
    pub init: InitStrategy,
    pub precision: Precision,
}

impl SynthesisJob {
    pub fn new(task: Task, loss: LossSpec) -> Self {
        Self {
            task,
            content: None,
            styles: Vec::new(),
            loss,
            duration_s: None,
            stage1: LbfgsConfig::default(),
            stage2: LbfgsConfig::default(),
            griffin_lim_iters: DEFAULT_GRIFFIN_LIM_ITERS,
            seed: 0,
            init: InitStrategy::Noise,
            precision: Precision::High,
        }
    }

    pub fn with_budgets(mut self, stage1: usize, stage2: usize) -> Self {
        self.stage1.max_iters = stage1;
        self.stage2.max_iters = stage2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let needs_content = matches!(self.task, Task::Invert | Task::Convert)
            || self.loss.has_role(Role::Content)
            || self.loss.energy_weight > 0.0
            || self.init != InitStrategy::Noise;
        if needs_content && self.content.is_none() {
            return Err(Error::InvalidArgument("this job needs a content waveform".into()));
        }
        let needs_style = matches!(self.task, Task::Texture | Task::Convert) || self.loss.has_role(Role::Style);
        if needs_style && self.styles.is_empty() {
            return Err(Error::InvalidArgument(
                "this job needs at least one style waveform".into(),
            ));
        }
        if self.task == Task::Texture && self.content.is_none() {
            match self.duration_s {
                Some(d) if d > 0.0 && d.is_finite() => {}
                _ => return Err(Error::InvalidArgument("texture jobs need a positive duration".into())),
            }
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermValue {
    pub layer: String,
    pub role: Role,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<TermValue>,
    pub energy: Option<f64>,
}

impl LossBreakdown {
    pub fn role_total(&self, role: Role) -> f64 {
        self.terms.iter().filter(|t| t.role == role).map(|t| t.value).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    /// peak-normalized output
    pub waveform: Waveform,
    /// stage 2 output before peak normalization
    pub raw: Waveform,
    pub stage1_trace: Vec<TraceRow>,
    pub stage2_trace: Vec<TraceRow>,
    /// spectral convergence per Griffin-Lim iteration
    pub griffin_lim: Vec<f64>,
    pub stage1_spectrogram: MagnitudeSpectrogram,
    /// objective at the stage 1 starting point
    pub initial: LossBreakdown,
    pub final_loss: LossBreakdown,
}

impl SynthesisResult {
    /// `stage,iteration,loss,grad_norm` for both optimizer stages, with
    /// Griffin-Lim spectral convergence in the loss column and an empty
    /// gradient norm.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("stage,iteration,loss,grad_norm\n");
        for r in &self.stage1_trace {
            out.push_str(&format!("spectrogram,{},{:e},{:e}\n", r.iteration, r.loss, r.grad_norm));
        }
        for (i, sc) in self.griffin_lim.iter().enumerate() {
            out.push_str(&format!("griffin_lim,{},{sc:e},\n", i + 1));
        }
        for r in &self.stage2_trace {
            out.push_str(&format!("waveform,{},{:e},{:e}\n", r.iteration, r.loss, r.grad_norm));
        }
        out
    }
}

/// Scales `w` so its peak is `peak`; silence is returned unchanged.
pub fn peak_normalize(w: &Waveform, peak: f64) -> Waveform {
    let p = w.peak();
    if p == 0.0 {
        return w.clone();
    }
    Waveform::new(w.samples.iter().map(|s| s * peak / p).collect(), w.sample_rate_hz)
}

/// `‖a − b‖_F / ‖b‖_F` over the full feature tensors.
pub fn feature_relative_error(a: &FeatureTensor, b: &FeatureTensor) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_relative_error",
            detail: format!("{:?} vs {:?}", a.values.shape(), b.values.shape()),
        });
    }
    Ok(a.values.relative_error(&b.values))
}

/// Mean absolute relative error of per-frame energies over `frames`.
pub fn energy_relative_error(generated: &FeatureTensor, reference: &FeatureTensor, frames: &[usize]) -> f64 {
    let (eg, er) = (generated.frame_energies(), reference.frame_energies());
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().map(|&t| ((eg[t] - er[t]) / er[t]).abs()).sum::<f64>() / frames.len() as f64
}

/// An objective recorded once on a graph and re-evaluated per iterate.
struct Problem {
    g: Graph,
    input: NodeId,
    shape: Vec<usize>,
    loss: crate::losses::LossNodes,
}

impl Problem {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.g
            .reevaluate(&[(self.input, Tensor::new(self.shape.clone(), x.to_vec())?)])?;
        let f = self.g.value(self.loss.total).item();
        if !f.is_finite() {
            return Err(Error::Numerical("objective is not finite".into()));
        }
        let mut grads = self.g.backward(self.loss.total)?;
        Ok((f, grads.take(self.input).into_data()))
    }

    fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.g.value(self.loss.total).item(),
            terms: self
                .loss
                .terms
                .iter()
                .map(|(layer, role, id)| TermValue {
                    layer: layer.clone(),
                    role: *role,
                    value: self.g.value(*id).item(),
                })
                .collect(),
            energy: self.loss.energy.map(|id| self.g.value(id).item()),
        }
    }
}

pub struct Synthesizer {
    pub net: Network,
    pub frontend: Frontend,
}

impl Synthesizer {
    pub fn new(net: Network, cfg: FrontendConfig) -> Result<Self> {
        let frontend = Frontend::new(cfg)?;
        if frontend.config().num_channels != net.spec.input_freq {
            return Err(Error::ShapeMismatch {
                op: "synthesizer",
                detail: format!(
                    "front end has {} channels, network expects {}",
                    frontend.config().num_channels,
                    net.spec.input_freq
                ),
            });
        }
        Ok(Self { net, frontend })
    }

    pub fn features(&self, w: &Waveform) -> Result<FeatureTensor> {
        self.frontend.waveform_features(w)
    }

    /// Reference statistics for `spec`: content activations and frame
    /// energies from `content`, Grams pooled over `styles`.
    pub fn targets(&self, content: Option<&Waveform>, styles: &[Waveform], spec: &LossSpec) -> Result<LossTargets> {
        spec.validate(&self.net.spec)?;
        let mut targets = LossTargets::default();
        let deepest = |role: Role| {
            spec.terms
                .iter()
                .filter(|t| t.role == role)
                .map(|t| self.net.spec.layer_index(&t.layer))
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().max())
        };
        if let Some(c) = content {
            let f = self.features(c)?;
            if let Some(d) = deepest(Role::Content)? {
                let acts = self
                    .net
                    .forward_collect(&f, &self.net.spec.layers[d].name, Mode::Inference)?;
                for t in spec.terms.iter().filter(|t| t.role == Role::Content) {
                    targets.content.push((t.layer.clone(), acts.get(&t.layer)?.clone()));
                }
            }
            targets.energy = Some(f.frame_energies());
        }
        if let Some(d) = deepest(Role::Style)? {
            let mut per_style = Vec::with_capacity(styles.len());
            for s in styles {
                let f = self.features(s)?;
                per_style.push(
                    self.net
                        .forward_collect(&f, &self.net.spec.layers[d].name, Mode::Inference)?,
                );
            }
            for t in spec.terms.iter().filter(|t| t.role == Role::Style) {
                let acts = per_style
                    .iter()
                    .map(|a| a.get(&t.layer).cloned())
                    .collect::<Result<Vec<_>>>()?;
                targets.style.push((t.layer.clone(), pooled_style_gram(&acts)?));
            }
        }
        Ok(targets)
    }

    fn build(
        &self,
        input: Tensor,
        waveform_input: bool,
        targets: &LossTargets,
        spec: &LossSpec,
        precision: Precision,
    ) -> Result<Problem> {
        let mut g = Graph::new(precision);
        let shape = input.shape().to_vec();
        let x = g.variable(input);
        let features = if waveform_input {
            self.frontend.graph_features_from_waveform(&mut g, x)?
        } else {
            let mag = g.exp(x)?;
            self.frontend.graph_features_from_magnitude(&mut g, mag)?
        };
        let mut activations = Vec::new();
        if let Some(d) = spec.deepest_layer(&self.net.spec)? {
            let params = self.net.bind(&mut g, false)?;
            let nodes = self.net.forward_graph(&mut g, &params, features, d, Mode::Inference)?;
            activations = nodes
                .iter()
                .zip(&self.net.spec.layers)
                .map(|(n, l)| (l.name.clone(), n.activation))
                .collect();
        }
        let energy = if spec.energy_weight > 0.0 {
            Some(self.frontend.graph_frame_energy(&mut g, features)?)
        } else {
            None
        };
        let loss = graph_total_loss(&mut g, &activations, energy, targets, spec)?;
        Ok(Problem {
            g,
            input: x,
            shape,
            loss,
        })
    }

    /// Objective value of a waveform against `targets`.
    pub fn evaluate(&self, w: &Waveform, targets: &LossTargets, spec: &LossSpec) -> Result<LossBreakdown> {
        let mut p = self.build(w.to_tensor(), true, targets, spec, Precision::High)?;
        p.eval(&w.samples)?;
        Ok(p.breakdown())
    }

    fn frame_count(&self, job: &SynthesisJob) -> Result<usize> {
        let cfg = self.frontend.config();
        let samples = match &job.content {
            Some(c) => c.len(),
            None => (job.duration_s.unwrap_or(0.0) * cfg.sample_rate_hz as f64).round() as usize,
        };
        let t = cfg
            .num_frames(samples)
            .ok_or_else(|| Error::InvalidArgument(format!("{samples} samples is shorter than one analysis window")))?;
        self.net.spec.layer_shapes(t)?;
        Ok(t)
    }

    fn initial_log_magnitude(&self, job: &SynthesisJob, frames: usize) -> Result<Tensor> {
        let bins = self.frontend.config().kept_bins();
        match (job.init, &job.content) {
            (InitStrategy::Noise, _) => {
                let references: Vec<&Waveform> = match (job.task, &job.content) {
                    (Task::Texture, _) | (_, None) => job.styles.iter().collect(),
                    (_, Some(c)) => vec![c],
                };
                let mut power = 0.0;
                let mut count = 0usize;
                for r in references {
                    let s = self.frontend.spectrogram(r)?;
                    power += s.values.data().iter().map(|m| m * m).sum::<f64>();
                    count += s.values.len();
                }
                if power <= 0.0 {
                    return Err(Error::InvalidArgument("reference has no energy".into()));
                }
                // E[exp(2L)] = exp(2μ + 2σ²) matches the mean reference power
                let mu = 0.5 * (power / count as f64).ln() - NOISE_SIGMA * NOISE_SIGMA;
                let normal = Normal::new(mu, NOISE_SIGMA).expect("positive sigma");
                let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
                Tensor::new(
                    vec![frames, bins],
                    (0..frames * bins).map(|_| normal.sample(&mut rng)).collect(),
                )
            }
            (_, Some(c)) => Ok(self.frontend.spectrogram(c)?.values.map(f64::ln)),
            (_, None) => Err(Error::InvalidArgument("content initialization without content".into())),
        }
    }

    pub fn run_job(&self, job: &SynthesisJob) -> Result<SynthesisResult> {
        job.validate()?;
        let cfg = self.frontend.config().clone();
        let frames = self.frame_count(job)?;
        let targets = self.targets(job.content.as_ref(), &job.styles, &job.loss)?;

        let l0 = self.initial_log_magnitude(job, frames)?;
        let mut p1 = self.build(l0.clone(), false, &targets, &job.loss, job.precision)?;
        p1.eval(l0.data())?;
        let initial = p1.breakdown();

        let (stage1_trace, stage1_spectrogram, start, gl) = if job.init == InitStrategy::ContentWaveform {
            let content = job.content.clone().expect("validated");
            let mag = MagnitudeSpectrogram::new(l0.map(f64::exp))?;
            (Vec::new(), mag, content, Vec::new())
        } else {
            let r1 = lbfgs_minimize(|x| p1.eval(x), l0.into_data(), &job.stage1)?;
            let log_mag = Tensor::new(vec![frames, cfg.kept_bins()], r1.x)?;
            let smooth = MagnitudeSpectrogram::new(log_mag.map(f64::exp))?;
            // undo the smoothing so Griffin-Lim sees exact magnitudes
            let eps = cfg.modulus_epsilon;
            let exact = MagnitudeSpectrogram::new(smooth.values.map(|m| (m * m - eps).max(0.0).sqrt()))?;
            let phase = griffin_lim(&exact, &cfg, job.griffin_lim_iters, job.seed)?;
            (r1.trace, smooth, phase.waveform, phase.convergence)
        };

        let mut p2 = self.build(start.to_tensor(), true, &targets, &job.loss, job.precision)?;
        let r2 = lbfgs_minimize(|x| p2.eval(x), start.samples.clone(), &job.stage2)?;
        p2.eval(&r2.x)?;
        let final_loss = p2.breakdown();
        let raw = Waveform::new(r2.x, cfg.sample_rate_hz);
        Ok(SynthesisResult {
            waveform: peak_normalize(&raw, OUTPUT_PEAK),
            raw,
            stage1_trace,
            stage2_trace: r2.trace,
            griffin_lim: gl,
            stage1_spectrogram,
            initial,
            final_loss,
        })
    }

    /// Content-only reconstruction from one layer's activations. The energy
    /// penalty defaults to on for fully connected layers and off otherwise.
    pub fn invert_from_layer(
        &self,
        content: &Waveform,
        layer: &str,
        energy_penalty: Option<bool>,
        budgets: (usize, usize),
        seed: u64,
    ) -> Result<SynthesisResult> {
        let idx = self.net.spec.layer_index(layer)?;
        let deep = self.net.spec.layers[idx].kind != LayerKind::Conv;
        let weight = if energy_penalty.unwrap_or(deep) { 1.0 } else { 0.0 };
        let mut job =
            SynthesisJob::new(Task::Invert, LossSpec::inversion(layer, weight)).with_budgets(budgets.0, budgets.1);
        job.content = Some(content.clone());
        job.seed = seed;
        self.run_job(&job)
    }

    pub fn synthesize_texture(
        &self,
        styles: &[Waveform],
        layers: &[String],
        duration_s: f64,
        budgets: (usize, usize),
        seed: u64,
    ) -> Result<SynthesisResult> {
        if styles.is_empty() {
            return Err(Error::InvalidArgument("texture synthesis needs style waveforms".into()));
        }
        let mut job = SynthesisJob::new(Task::Texture, LossSpec::texture(layers)).with_budgets(budgets.0, budgets.1);
        job.styles = styles.to_vec();
        job.duration_s = Some(duration_s);
        job.seed = seed;
        self.run_job(&job)
    }

    pub fn convert_voice(
        &self,
        content: &Waveform,
        styles: &[Waveform],
        spec: Option<LossSpec>,
        budgets: (usize, usize),
        seed: u64,
    ) -> Result<SynthesisResult> {
        let spec = spec.unwrap_or_else(|| LossSpec::conversion_defaults(&self.net.spec));
        let mut job = SynthesisJob::new(Task::Convert, spec).with_budgets(budgets.0, budgets.1);
        job.content = Some(content.clone());
        job.styles = styles.to_vec();
        job.seed = seed;
        self.run_job(&job)
    }

    /// Features of a stage 1 spectrogram, for inspection.
    pub fn spectrogram_features(&self, s: &MagnitudeSpectrogram) -> Result<FeatureTensor> {
        self.frontend.features(FeatureInput::Spectrogram(s))
    }
}

/// Central finite-difference check of the gradient with respect to the
/// waveform of the full path: framing, DFT, smooth modulus, filterbank, log,
/// deltas, the toy network to its last hidden layer, and the weighted style,
/// content and energy objective. Checks `samples` evenly spaced samples.
pub fn end_to_end_gradcheck(seed: u64, samples: usize) -> Result<crate::autodiff::gradcheck::GradCheckReport> {
    use crate::autodiff::gradcheck::{check, DEFAULT_STEP};
    use crate::net::NetworkSpec;

    let net = Network::random(NetworkSpec::toy(4), seed)?;
    let synth = Synthesizer::new(net, FrontendConfig::toy())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.3).expect("positive sigma");
    let mut noise = |n: usize| Waveform::new((0..n).map(|_| normal.sample(&mut rng)).collect(), 16000);
    let len = synth.frontend.config().samples_for_frames(8);
    let (x, content, style) = (noise(len), noise(len), noise(len + 480));
    let spec = LossSpec::conversion_defaults(&synth.net.spec);
    let targets = synth.targets(Some(&content), &[style], &spec)?;
    check(&[x.to_tensor()], DEFAULT_STEP, Some(samples), |g, ids| {
        let features = synth.frontend.graph_features_from_waveform(g, ids[0])?;
        let deepest = spec.deepest_layer(&synth.net.spec)?.expect("terms present");
        let params = synth.net.bind(g, false)?;
        let nodes = synth
            .net
            .forward_graph(g, &params, features, deepest, Mode::Inference)?;
        let acts: Vec<(String, NodeId)> = nodes
            .iter()
            .zip(&synth.net.spec.layers)
            .map(|(n, l)| (l.name.clone(), n.activation))
            .collect();
        let energy = synth.frontend.graph_frame_energy(g, features)?;
        Ok(graph_total_loss(g, &acts, Some(energy), &targets, &spec)?.total)
    })
}
