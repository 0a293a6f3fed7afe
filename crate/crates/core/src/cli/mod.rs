//! Command-line surface: audio I/O, run configuration and one subcommand per
//! task.

pub mod config;
pub mod wav;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::gradcheck::{operator_suite, relative_error, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::autodiff::{Precision, Tensor};
use crate::ctc::{ctc_loss, Charset};
use crate::error::{Error, Result};
use crate::frontend::{FeatureTensor, Frontend, FrontendConfig};
use crate::losses::LossSpec;
use crate::net::train::{symbol_error_rate, toy_examples, train_ctc, TrainConfig};
use crate::net::{LayerKind, Network, NetworkSpec, WeightFile};
use crate::optim::trace_csv;
use crate::speaker::{
    accuracy, classical_mds, coordinates_csv, distance_matrix, evaluation_csv, gram_feature_vector, leave_one_out,
    nn_classify, toy_charset, toy_corpus, FEATURE_LAYER,
};
use crate::synth::{end_to_end_gradcheck, SynthesisJob, SynthesisResult, Synthesizer, Task};

pub use config::{RunConfig, CONFIG_HELP};
pub use wav::{read_wav, write_wav};

/// Exit status for a finished command.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Numerical(_)) => 3,
        Err(_) => 2,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "speechstyle",
    version,
    about = "Speech inversion, texture synthesis and voice conversion with a convolutional CTC network",
    after_long_help = CONFIG_HELP
)]
pub struct Cli {
    /// seed for every random choice (default 0, or the config's [run] seed)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// arithmetic precision of forward and backward passes
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// write the optimizer trace as CSV
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    High,
    Single,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::High => Precision::High,
            PrecisionArg::Single => Precision::Single,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Paper,
    Toy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dump the T x C x 3 feature tensor of a WAV file as CSV
    Features {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// also write the 257 x C filterbank matrix as CSV
        #[arg(long)]
        dump_filterbank: Option<PathBuf>,
        /// take the front end from this weight file
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper", conflicts_with = "weights")]
        preset: Preset,
    },
    /// Build the synthetic toy corpus and train the toy network with Adam and CTC
    TrainToy {
        #[arg(long, default_value_t = 1)]
        corpus_seed: u64,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
        /// extra utterances per speaker for a held-out error rate
        #[arg(long, default_value_t = 5)]
        held_out: usize,
        /// write the corpus as WAV files into this directory
        #[arg(long)]
        dump_corpus: Option<PathBuf>,
    },
    /// Reconstruct audio from one layer's activations of a recording
    Invert {
        wav: PathBuf,
        #[arg(long)]
        layer: String,
        /// energy penalty (default: on for fully connected layers, off for convolutions)
        #[arg(long, value_enum)]
        energy_penalty: Option<Switch>,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Synthesize a texture matching the Gram statistics of style recordings
    Texture {
        #[arg(long, num_args = 1.., required = true)]
        style: Vec<PathBuf>,
        #[arg(long, default_value = "C0-C5")]
        layers: String,
        /// output length in seconds (default 2.0, or the config's [run] duration)
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Re-synthesize a content recording with the low-level statistics of style recordings
    Convert {
        #[arg(long)]
        content: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        style: Vec<PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Nearest-neighbour speaker identification on Gram feature vectors
    SpeakerId {
        /// WAV files labelled by the file-name prefix before the first `_`
        #[arg(long)]
        train_dir: PathBuf,
        /// classify these against the training set (default: leave-one-out)
        #[arg(long)]
        test_dir: Option<PathBuf>,
        /// layer list such as `C0-C3` or `C0,C2,FC0`; `FEAT` is the raw features
        #[arg(long, default_value = "C0-C3")]
        layers: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper", conflicts_with = "weights")]
        preset: Preset,
        /// predictions CSV (default: standard output)
        #[arg(long)]
        out: Option<PathBuf>,
        /// 2-D classical MDS coordinates of every vector, as CSV
        #[arg(long)]
        mds: Option<PathBuf>,
    },
    /// Finite-difference checks of every operator, CTC and the end-to-end path
    Gradcheck {
        /// waveform samples probed by the end-to-end check
        #[arg(long, default_value_t = 60)]
        samples: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// MGW1 weight file (or [network] weights in the config)
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// output WAV (or [output] wav in the config)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stage1_iters: Option<usize>,
    #[arg(long)]
    pub stage2_iters: Option<usize>,
    #[arg(long)]
    pub griffin_lim_iters: Option<usize>,
}

/// Parses `C0-C3`, `C0,C2,FC0` or mixtures into layer names in list order.
/// Ranges follow network order. `FEAT` is accepted when `allow_features`.
pub fn parse_layers(text: &str, spec: &NetworkSpec, allow_features: bool) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for item in text.split(',').map(str::trim) {
        if item.is_empty() {
            return Err(Error::InvalidArgument(format!("empty entry in layer list `{text}`")));
        }
        if item == FEATURE_LAYER {
            if !allow_features {
                return Err(Error::InvalidArgument(format!(
                    "{FEATURE_LAYER} is not a network layer"
                )));
            }
            out.push(item.to_string());
            continue;
        }
        match item.split_once('-') {
            Some((a, b)) => {
                let (i, j) = (spec.layer_index(a.trim())?, spec.layer_index(b.trim())?);
                if j < i {
                    return Err(Error::InvalidArgument(format!("layer range `{item}` runs backwards")));
                }
                out.extend(spec.layers[i..=j].iter().map(|l| l.name.clone()));
            }
            None => {
                spec.layer_index(item)?;
                out.push(item.to_string());
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = out.iter().find(|l| !seen.insert(l.as_str())) {
        return Err(Error::InvalidArgument(format!("layer {dup} listed twice")));
    }
    Ok(out)
}

/// Rows `frame,channel,static,delta,delta_delta`.
pub fn features_csv(f: &FeatureTensor) -> String {
    let mut s = String::from("frame,channel,static,delta,delta_delta\n");
    let c = f.channels();
    for (i, v) in f.values.data().chunks(3).enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", i / c, i % c, v[0], v[1], v[2]);
    }
    s
}

/// Rows `bin,c0,c1,...`.
pub fn matrix_csv(m: &Tensor, row_name: &str, col_prefix: &str) -> String {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut s = String::from(row_name);
    for j in 0..cols {
        let _ = write!(s, ",{col_prefix}{j}");
    }
    s.push('\n');
    for i in 0..rows {
        let _ = write!(s, "{i}");
        for v in &m.data()[i * cols..(i + 1) * cols] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn preset_config(p: Preset) -> FrontendConfig {
    match p {
        Preset::Paper => FrontendConfig::default(),
        Preset::Toy => FrontendConfig::toy(),
    }
}

/// Front end for a network: the explicit one if given, else the one stored
/// with the weights, else the preset whose channel count matches.
fn frontend_for(
    explicit: Option<FrontendConfig>,
    stored: Option<FrontendConfig>,
    spec: &NetworkSpec,
) -> Result<FrontendConfig> {
    if let Some(f) = explicit.or(stored) {
        return Ok(f);
    }
    [FrontendConfig::default(), FrontendConfig::toy()]
        .into_iter()
        .find(|f| f.num_channels == spec.input_freq)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no front end preset has {} channels; set [frontend] in a config",
                spec.input_freq
            ))
        })
}

fn load_weights(path: &Path) -> Result<(Network, Option<FrontendConfig>)> {
    let wf = WeightFile::load(path)?;
    Ok((Network::new(wf.spec, wf.weights)?, wf.frontend))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Sorted `.wav` files of a directory.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn speaker_label(p: &Path) -> String {
    let stem = file_stem(p);
    stem.split('_').next().unwrap_or(&stem).to_string()
}

struct Globals {
    seed: Option<u64>,
    precision: Option<Precision>,
    trace: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let globals = Globals {
        seed: cli.seed,
        precision: cli.precision.map(Into::into),
        trace: cli.trace,
    };
    match cli.command {
        Command::Features {
            wav,
            out: csv,
            dump_filterbank,
            weights,
            preset,
        } => {
            let cfg = match weights {
                Some(p) => {
                    let (net, stored) = load_weights(&p)?;
                    frontend_for(None, stored, &net.spec)?
                }
                None => preset_config(preset),
            };
            let frontend = Frontend::new(cfg)?;
            let f = frontend.waveform_features(&read_wav(&wav)?)?;
            write_text(&csv, &features_csv(&f))?;
            writeln!(
                out,
                "{} frames x {} channels x 3 -> {}",
                f.frames(),
                f.channels(),
                csv.display()
            )?;
            if let Some(p) = dump_filterbank {
                write_text(&p, &matrix_csv(frontend.filterbank(), "bin", "c"))?;
                writeln!(out, "filterbank -> {}", p.display())?;
            }
            Ok(())
        }
        Command::TrainToy {
            corpus_seed,
            steps,
            out: path,
            speakers,
            utterances,
            held_out,
            dump_corpus,
        } => train_toy(
            &globals,
            TrainToyArgs {
                corpus_seed,
                steps,
                speakers,
                utterances,
                held_out,
                dump_corpus,
            },
            &path,
            out,
        ),
        Command::Invert {
            wav,
            layer,
            energy_penalty,
            synth,
        } => {
            let (rc, synthesizer) = setup(&synth)?;
            let content = read_wav(&wav)?;
            let loss = match rc.loss.clone() {
                Some(l) => l,
                None => {
                    let idx = synthesizer.net.spec.layer_index(&layer)?;
                    let deep = synthesizer.net.spec.layers[idx].kind != LayerKind::Conv;
                    let on = match energy_penalty {
                        Some(Switch::On) => true,
                        Some(Switch::Off) => false,
                        None => deep,
                    };
                    LossSpec::inversion(&layer, if on { 1.0 } else { 0.0 })
                }
            };
            let mut job = SynthesisJob::new(Task::Invert, loss);
            job.content = Some(content);
            run_synthesis(&globals, &synth, &rc, &synthesizer, job, out)
        }
        Command::Texture {
            style,
            layers,
            duration,
            synth,
        } => {
            let (rc, synthesizer) = setup(&synth)?;
            let loss = match rc.loss.clone() {
                Some(l) => l,
                None => LossSpec::texture(&parse_layers(&layers, &synthesizer.net.spec, false)?),
            };
            let mut job = SynthesisJob::new(Task::Texture, loss);
            job.styles = style.iter().map(|p| read_wav(p)).collect::<Result<_>>()?;
            job.duration_s = Some(duration.or(rc.duration_s).unwrap_or(2.0));
            run_synthesis(&globals, &synth, &rc, &synthesizer, job, out)
        }
        Command::Convert { content, style, synth } => {
            let (rc, synthesizer) = setup(&synth)?;
            let loss = rc
                .loss
                .clone()
                .unwrap_or_else(|| LossSpec::conversion_defaults(&synthesizer.net.spec));
            let mut job = SynthesisJob::new(Task::Convert, loss);
            job.content = Some(read_wav(&content)?);
            job.styles = style.iter().map(|p| read_wav(p)).collect::<Result<_>>()?;
            run_synthesis(&globals, &synth, &rc, &synthesizer, job, out)
        }
        Command::SpeakerId {
            train_dir,
            test_dir,
            layers,
            weights,
            preset,
            out: csv,
            mds,
        } => {
            let (net, cfg) = match weights {
                Some(p) => {
                    let (net, stored) = load_weights(&p)?;
                    let cfg = frontend_for(None, stored, &net.spec)?;
                    (Some(net), cfg)
                }
                None => (None, preset_config(preset)),
            };
            let layers = match &net {
                Some(n) => parse_layers(&layers, &n.spec, true)?,
                None if layers == FEATURE_LAYER => vec![layers.clone()],
                None => return Err(Error::InvalidArgument("network layers need --weights".into())),
            };
            // FEAT alone never touches the network, so a placeholder suffices
            let net = match net {
                Some(n) => n,
                None => Network::random(NetworkSpec::toy(1), 0)?,
            };
            let frontend = Frontend::new(cfg)?;
            let vectors = |files: &[PathBuf]| -> Result<Vec<Vec<f64>>> {
                files
                    .iter()
                    .map(|p| gram_feature_vector(&frontend.waveform_features(&read_wav(p)?)?, &layers, &net))
                    .collect()
            };
            let train_files = wav_files(&train_dir)?;
            let mut names: Vec<String> = train_files.iter().map(|p| speaker_label(p)).collect();
            names.sort();
            names.dedup();
            let index = |p: &Path| names.iter().position(|n| *n == speaker_label(p));
            let train: Vec<(usize, Vec<f64>)> = train_files
                .iter()
                .map(|p| index(p).expect("label drawn from these files"))
                .zip(vectors(&train_files)?)
                .collect();
            let (ids, truth, predicted, all_vectors) = match test_dir {
                None => {
                    let pred = leave_one_out(&train)?;
                    let ids: Vec<String> = train_files.iter().map(|p| file_stem(p)).collect();
                    let truth: Vec<String> = train_files.iter().map(|p| speaker_label(p)).collect();
                    let pred: Vec<String> = pred.iter().map(|&i| names[i].clone()).collect();
                    (ids, truth, pred, train.iter().map(|t| t.1.clone()).collect::<Vec<_>>())
                }
                Some(dir) => {
                    let test_files = wav_files(&dir)?;
                    let test = vectors(&test_files)?;
                    let pred = test
                        .iter()
                        .map(|v| nn_classify(&train, v).map(|i| names[i].clone()))
                        .collect::<Result<Vec<_>>>()?;
                    let ids = test_files.iter().map(|p| file_stem(p)).collect();
                    let truth = test_files.iter().map(|p| speaker_label(p)).collect();
                    let mut all: Vec<Vec<f64>> = train.iter().map(|t| t.1.clone()).collect();
                    all.extend(test);
                    (ids, truth, pred, all)
                }
            };
            let csv_text = evaluation_csv(&ids, &truth, &predicted);
            match csv {
                Some(p) => write_text(&p, &csv_text)?,
                None => out.write_all(csv_text.as_bytes())?,
            }
            writeln!(
                out,
                "accuracy {:.4} over {} utterances ({})",
                accuracy(&truth, &predicted),
                truth.len(),
                layers.join(",")
            )?;
            if let Some(p) = mds {
                let mut all_ids: Vec<String> = train_files.iter().map(|p| file_stem(p)).collect();
                if all_vectors.len() > all_ids.len() {
                    all_ids.extend(ids.iter().cloned());
                }
                let coords = classical_mds(&distance_matrix(&all_vectors))?;
                write_text(&p, &coordinates_csv(&all_ids, &coords))?;
            }
            Ok(())
        }
        Command::Gradcheck { samples } => gradcheck(globals.seed.unwrap_or(0), samples, out),
    }
}

struct TrainToyArgs {
    corpus_seed: u64,
    steps: usize,
    speakers: usize,
    utterances: usize,
    held_out: usize,
    dump_corpus: Option<PathBuf>,
}

fn train_toy(globals: &Globals, a: TrainToyArgs, path: &Path, out: &mut dyn Write) -> Result<()> {
    let seed = globals.seed.unwrap_or(0);
    let corpus = toy_corpus(a.speakers, a.utterances, a.corpus_seed)?;
    let held = corpus.more_utterances(a.held_out, 1)?;
    if let Some(dir) = &a.dump_corpus {
        std::fs::create_dir_all(dir)?;
        let charset: Charset = toy_charset();
        let mut transcripts = String::from("utterance,transcript\n");
        for u in corpus.utterances.iter().chain(&held) {
            write_wav(&dir.join(format!("{}.wav", u.id)), &u.waveform)?;
            let _ = writeln!(transcripts, "{},{}", u.id, charset.render(&u.labels));
        }
        write_text(&dir.join("transcripts.csv"), &transcripts)?;
    }
    let cfg_frontend = FrontendConfig::toy();
    let frontend = Frontend::new(cfg_frontend.clone())?;
    let train = toy_examples(&frontend, &corpus.utterances)?;
    let held = toy_examples(&frontend, &held)?;
    let mut net = Network::random(NetworkSpec::toy(toy_charset().len() - 1), seed)?;
    let cfg = TrainConfig {
        precision: globals.precision.unwrap_or_default(),
        ..TrainConfig::toy(a.steps, seed)
    };
    let report = train_ctc(&mut net, &train, &cfg, |step, loss| {
        if (step + 1) % 500 == 0 {
            eprintln!("step {:>5}  loss {loss:.4}", step + 1);
        }
    })?;
    WeightFile {
        spec: net.spec.clone(),
        frontend: Some(cfg_frontend),
        weights: net.weights.clone(),
    }
    .save(path)?;
    if let Some(p) = &globals.trace {
        write_text(p, &trace_csv(&report.trace))?;
    }
    writeln!(out, "train symbol error rate {:.4}", symbol_error_rate(&net, &train)?)?;
    if !held.is_empty() {
        writeln!(out, "held-out symbol error rate {:.4}", symbol_error_rate(&net, &held)?)?;
    }
    writeln!(out, "weights -> {}", path.display())?;
    Ok(())
}

fn setup(args: &SynthArgs) -> Result<(RunConfig, Synthesizer)> {
    let rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let path = args
        .weights
        .clone()
        .or_else(|| rc.weights.clone())
        .ok_or_else(|| Error::InvalidArgument("no weights: pass --weights or set [network] weights".into()))?;
    let (net, stored) = load_weights(&path)?;
    let cfg = frontend_for(rc.frontend.clone(), stored, &net.spec)?;
    let synthesizer = Synthesizer::new(net, cfg)?;
    Ok((rc, synthesizer))
}

fn run_synthesis(
    globals: &Globals,
    args: &SynthArgs,
    rc: &RunConfig,
    synthesizer: &Synthesizer,
    mut job: SynthesisJob,
    out: &mut dyn Write,
) -> Result<()> {
    let wav_path = args
        .out
        .clone()
        .or_else(|| rc.output_wav.clone())
        .ok_or_else(|| Error::InvalidArgument("no output: pass --out or set [output] wav".into()))?;
    job.stage1 = rc.stage1.clone();
    job.stage2 = rc.stage2.clone();
    if let Some(n) = args.stage1_iters {
        job.stage1.max_iters = n;
    }
    if let Some(n) = args.stage2_iters {
        job.stage2.max_iters = n;
    }
    job.griffin_lim_iters = args.griffin_lim_iters.unwrap_or(rc.griffin_lim_iters);
    job.seed = globals.seed.or(rc.seed).unwrap_or(0);
    job.precision = globals.precision.or(rc.precision).unwrap_or_default();
    job.init = rc.init;
    let result = synthesizer.run_job(&job)?;
    write_wav(&wav_path, &result.waveform)?;
    if let Some(p) = globals.trace.as_ref().or(rc.trace.as_ref()) {
        write_text(p, &result.trace_csv())?;
    }
    report(&result, &wav_path, out)
}

fn report(r: &SynthesisResult, path: &Path, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "loss {:.6e} -> {:.6e}", r.initial.total, r.final_loss.total)?;
    for (a, b) in r.initial.terms.iter().zip(&r.final_loss.terms) {
        let role = serde_json::to_string(&a.role)?;
        writeln!(
            out,
            "  {:<4} {:<9} {:.6e} -> {:.6e}",
            a.layer,
            role.trim_matches('"'),
            a.value,
            b.value
        )?;
    }
    if let (Some(a), Some(b)) = (r.initial.energy, r.final_loss.energy) {
        writeln!(out, "  energy         {a:.6e} -> {b:.6e}")?;
    }
    if let Some(sc) = r.griffin_lim.last() {
        writeln!(out, "griffin-lim spectral convergence {sc:.4}")?;
    }
    writeln!(out, "{:.3} s -> {}", r.waveform.duration_s(), path.display())?;
    Ok(())
}

/// CTC loss gradient against central differences on a small random problem.
fn ctc_check(seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let logits = Tensor::new(vec![6, 4], data)?;
    let labels = [1, 2, 2];
    let (_, grad) = ctc_loss(&logits, &labels)?;
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += DEFAULT_STEP;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= DEFAULT_STEP;
        let numeric = (ctc_loss(&plus, &labels)?.0 - ctc_loss(&minus, &labels)?.0) / (2.0 * DEFAULT_STEP);
        worst = worst.max(relative_error(grad.data()[i], numeric));
    }
    Ok(worst)
}

fn gradcheck(seed: u64, samples: usize, out: &mut dyn Write) -> Result<()> {
    let mut results: Vec<(String, f64)> = operator_suite(seed)?
        .into_iter()
        .map(|c| (c.name, c.report.max_rel_error))
        .collect();
    results.push(("ctc_loss".into(), ctc_check(seed)?));
    results.push(("end_to_end".into(), end_to_end_gradcheck(seed, samples)?.max_rel_error));
    let mut failed = Vec::new();
    for (name, err) in &results {
        let ok = *err < DEFAULT_TOLERANCE;
        writeln!(out, "{name:<16} {err:.3e} {}", if ok { "ok" } else { "FAILED" })?;
        if !ok {
            failed.push(name.as_str());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks below {DEFAULT_TOLERANCE:e}", results.len())?;
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists() {
        let spec = NetworkSpec::toy(4);
        assert_eq!(parse_layers("C0-C3", &spec, false).unwrap(), ["C0", "C1", "C2", "C3"]);
        assert_eq!(parse_layers("C4, FC0", &spec, false).unwrap(), ["C4", "FC0"]);
        assert_eq!(parse_layers("FEAT,C0-C1", &spec, true).unwrap(), ["FEAT", "C0", "C1"]);
        for bad in ["C3-C0", "C9", "C0,,C1", "C0-C2,C1", "FEAT"] {
            assert!(parse_layers(bad, &spec, false).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), 0);
        assert_eq!(exit_code(&Err(Error::InvalidArgument("x".into()))), 2);
        assert_eq!(exit_code(&Err(Error::Numerical("x".into()))), 3);
    }

    #[test]
    fn csv_shapes() {
        let f = FeatureTensor {
            values: Tensor::new(vec![2, 3, 3], (0..18).map(f64::from).collect()).unwrap(),
        };
        let s = features_csv(&f);
        assert_eq!(s.lines().count(), 7);
        assert_eq!(s.lines().nth(4).unwrap(), "1,0,9,10,11");
        let m = matrix_csv(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), "bin", "c");
        assert_eq!(m, "bin,c0,c1\n0,1,2\n1,3,4\n");
    }

    #[test]
    fn ctc_gradient_matches_differences() {
        assert!(ctc_check(3).unwrap() < DEFAULT_TOLERANCE);
    }

    #[test]
    fn labels_from_file_names() {
        assert_eq!(speaker_label(Path::new("/d/spk2_utt07.wav")), "spk2");
        assert_eq!(speaker_label(Path::new("alice.wav")), "alice");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
