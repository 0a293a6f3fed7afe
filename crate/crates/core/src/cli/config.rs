//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! [frontend]
//! preset = toy            # toy | paper, must precede other frontend keys
//! hop = 160
//! [network]
//! weights = toy.mgw
//! [loss]
//! style.C0 = 1e5
//! content.FC0 = 10
//! energy = 1.0
//! [optim]
//! stage1_iters = 1000
//! [run]
//! seed = 7
//! [output]
//! wav = out.wav
//! ```
//!
//! `#` and `;` start comments. Unknown sections and keys are rejected with
//! their line number. Relative paths resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::losses::{LossSpec, LossTerm, Role};
use crate::optim::LbfgsConfig;
use crate::synth::{InitStrategy, DEFAULT_GRIFFIN_LIM_ITERS};

/// Documented keys with their defaults, shown by `--help`.
pub const CONFIG_HELP: &str = "\
Config file keys (defaults in parentheses):
  [frontend] preset (paper, or the preset of the weight file), window_len (400),
             hop (160), dft_size (512), channels (80), boundary_hz (1000),
             fmax_hz (8000), modulus_epsilon (1e-3), log_floor (1e-6),
             sample_rate (16000, the only supported rate)
  [network]  weights (none)
  [loss]     style.<layer>, content.<layer>, energy; a [loss] section replaces the
             task's default objective entirely
  [optim]    stage1_iters (1000), stage2_iters (1000), history (10), grad_tol (1e-6),
             line_search_evals (20), griffin_lim_iters (100)
  [run]      seed (0), precision (high | single), init (noise | content-spectrogram |
             content-waveform), duration (seconds, texture only)
  [output]   wav, trace";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `None` when the file has no `[frontend]` section
    pub frontend: Option<FrontendConfig>,
    pub weights: Option<PathBuf>,
    /// `None` when the file has no `[loss]` section
    pub loss: Option<LossSpec>,
    pub stage1: LbfgsConfig,
    pub stage2: LbfgsConfig,
    pub griffin_lim_iters: usize,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub init: InitStrategy,
    pub duration_s: Option<f64>,
    pub output_wav: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frontend: None,
            weights: None,
            loss: None,
            stage1: LbfgsConfig::default(),
            stage2: LbfgsConfig::default(),
            griffin_lim_iters: DEFAULT_GRIFFIN_LIM_ITERS,
            seed: None,
            precision: None,
            init: InitStrategy::Noise,
            duration_s: None,
            output_wav: None,
            trace: None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Frontend,
    Network,
    Loss,
    Optim,
    Run,
    Output,
}

pub fn parse_precision(s: &str) -> Option<Precision> {
    match s {
        "high" => Some(Precision::High),
        "single" => Some(Precision::Single),
        _ => None,
    }
}

pub fn parse_init(s: &str) -> Option<InitStrategy> {
    match s {
        "noise" => Some(InitStrategy::Noise),
        "content-spectrogram" => Some(InitStrategy::ContentSpectrogram),
        "content-waveform" => Some(InitStrategy::ContentWaveform),
        _ => None,
    }
}

pub fn frontend_preset(name: &str) -> Option<FrontendConfig> {
    match name {
        "paper" => Some(FrontendConfig::default()),
        "toy" => Some(FrontendConfig::toy()),
        _ => None,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = Section::None;
        let mut loss_terms: Option<Vec<LossTerm>> = None;
        let mut energy = 0.0;
        let mut frontend_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| Error::Config { line, message };
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{content}`")))?;
                section = match name.trim() {
                    "frontend" => Section::Frontend,
                    "network" => Section::Network,
                    "loss" => Section::Loss,
                    "optim" => Section::Optim,
                    "run" => Section::Run,
                    "output" => Section::Output,
                    other => return Err(err(format!("unknown section [{other}]"))),
                };
                if section == Section::Loss {
                    loss_terms.get_or_insert_with(Vec::new);
                }
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
            if value.is_empty() {
                return Err(err(format!("empty value for `{key}`")));
            }
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("`{key}` needs a finite number, found `{v}`")))
            };
            let count = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| err(format!("`{key}` needs a non-negative integer, found `{v}`")))
            };
            let path = |v: &str| base_dir.join(v);
            let unknown = || err(format!("unknown key `{key}` in this section"));
            match section {
                Section::None => return Err(err(format!("key `{key}` appears before any section header"))),
                Section::Frontend => {
                    frontend_line = line;
                    if key == "preset" {
                        if cfg.frontend.is_some() {
                            return Err(err("`preset` must be the first frontend key".into()));
                        }
                        cfg.frontend =
                            Some(frontend_preset(value).ok_or_else(|| err(format!("unknown preset `{value}`")))?);
                        continue;
                    }
                    let f = cfg.frontend.get_or_insert_with(FrontendConfig::default);
                    match key {
                        "window_len" => f.window_len_samples = count(value)?,
                        "hop" => f.hop_samples = count(value)?,
                        "dft_size" => f.dft_size = count(value)?,
                        "channels" => f.num_channels = count(value)?,
                        "boundary_hz" => f.linear_mel_boundary_hz = num(value)?,
                        "fmax_hz" => f.fmax_hz = num(value)?,
                        "modulus_epsilon" => f.modulus_epsilon = num(value)?,
                        "log_floor" => f.log_floor = num(value)?,
                        "sample_rate" => {
                            if count(value)? != 16000 {
                                return Err(err(format!(
                                    "sample_rate {value} is unsupported; only 16000 is accepted"
                                )));
                            }
                        }
                        _ => return Err(unknown()),
                    }
                }
                Section::Network => match key {
                    "weights" => cfg.weights = Some(path(value)),
                    _ => return Err(unknown()),
                },
                Section::Loss => {
                    let terms = loss_terms.get_or_insert_with(Vec::new);
                    if key == "energy" {
                        energy = num(value)?;
                        if energy < 0.0 {
                            return Err(err("energy weight must be >= 0".into()));
                        }
                        continue;
                    }
                    let (role, layer) = match key.split_once('.') {
                        Some(("style", l)) => (Role::Style, l),
                        Some(("content", l)) => (Role::Content, l),
                        _ => return Err(unknown()),
                    };
                    let weight = num(value)?;
                    if weight < 0.0 {
                        return Err(err(format!("weight for {layer} must be >= 0")));
                    }
                    if terms.iter().any(|t| t.layer == layer) {
                        return Err(err(format!("layer {layer} already has a loss term")));
                    }
                    terms.push(LossTerm {
                        layer: layer.to_string(),
                        role,
                        weight,
                    });
                }
                Section::Optim => match key {
                    "stage1_iters" => cfg.stage1.max_iters = count(value)?,
                    "stage2_iters" => cfg.stage2.max_iters = count(value)?,
                    "history" => {
                        let h = count(value)?;
                        if h == 0 {
                            return Err(err("history must be >= 1".into()));
                        }
                        cfg.stage1.history = h;
                        cfg.stage2.history = h;
                    }
                    "grad_tol" => {
                        let g = num(value)?;
                        if g < 0.0 {
                            return Err(err("grad_tol must be >= 0".into()));
                        }
                        cfg.stage1.grad_tol = g;
                        cfg.stage2.grad_tol = g;
                    }
                    "line_search_evals" => {
                        let n = count(value)?;
                        if n == 0 {
                            return Err(err("line_search_evals must be >= 1".into()));
                        }
                        cfg.stage1.max_line_search_evals = n;
                        cfg.stage2.max_line_search_evals = n;
                    }
                    "griffin_lim_iters" => cfg.griffin_lim_iters = count(value)?,
                    _ => return Err(unknown()),
                },
                Section::Run => match key {
                    "seed" => {
                        cfg.seed = Some(
                            value
                                .parse()
                                .map_err(|_| err(format!("seed needs a u64, found `{value}`")))?,
                        )
                    }
                    "precision" => {
                        cfg.precision = Some(
                            parse_precision(value)
                                .ok_or_else(|| err(format!("precision must be high or single, found `{value}`")))?,
                        )
                    }
                    "init" => cfg.init = parse_init(value).ok_or_else(|| err(format!("unknown init `{value}`")))?,
                    "duration" => {
                        let d = num(value)?;
                        if d <= 0.0 {
                            return Err(err("duration must be > 0".into()));
                        }
                        cfg.duration_s = Some(d);
                    }
                    _ => return Err(unknown()),
                },
                Section::Output => match key {
                    "wav" => cfg.output_wav = Some(path(value)),
                    "trace" => cfg.trace = Some(path(value)),
                    _ => return Err(unknown()),
                },
            }
        }
        if let Some(f) = &cfg.frontend {
            f.validate().map_err(|e| Error::Config {
                line: frontend_line,
                message: e.to_string(),
            })?;
        }
        cfg.loss = loss_terms.map(|terms| LossSpec {
            terms,
            energy_weight: energy,
        });
        Ok(cfg)
    }
}
