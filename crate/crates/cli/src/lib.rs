//! Command-line entry points: corpus generation, training, long-form
//! sampling, evaluation, style editing and latent export.
//!
//! Every command writes `run.json` (command line, seed, version) and the
//! fully resolved `config.toml` into its output directory, so rerunning
//! with `--config <out>/config.toml` reproduces the outputs.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use cospeech_core::checkpoint::{load_checkpoint, Checkpoint};
use cospeech_core::dataset::{decode_clip, fit_speech, generate_toy_corpus, load_corpus, write_clip, Corpus, Split};
use cospeech_core::features::{SpeechFeaturizer, Waveform};
use cospeech_core::metrics::{evaluate, MetricsReport};
use cospeech_core::pipeline::{eval_windows, generate_windows, schedule, speech_beats, train_metric_autoencoder, window_beats};
use cospeech_core::sampler::{generate_long, write_generated, GenerationRequest, Guidance, SampleSidecar};
use cospeech_core::trainer::{fit_from, TrainState, FINAL_CHECKPOINT};
use cospeech_core::{ClipRecord, Config, Error, MotionSequence, SpeechFeatureSequence, StyleLabel};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const RUN_MANIFEST: &str = "run.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "cospeech", version, about = "Speech-driven motion diffusion with style control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic speech/motion corpus.
    GenData(GenData),
    /// Train the denoiser on a corpus.
    Train(Train),
    /// Generate motion of arbitrary length for one speech input.
    Sample(Sample),
    /// Compute FGD, SRGR, BeatAlign and Diversity against the test split.
    Evaluate(Evaluate),
    /// Generate one motion per requested (identity, emotion) pair.
    StyleEdit(StyleEdit),
    /// Write autoencoder latents of corpus (and generated) clips as CSV.
    ExportLatents(ExportLatents),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `training.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpeechInput {
    /// Mono 16-bit WAV file.
    #[arg(long, conflicts_with = "features")]
    audio: Option<PathBuf>,
    /// Whitespace-separated transcript token ids, one per motion frame.
    #[arg(long, requires = "audio")]
    tokens: Option<PathBuf>,
    /// Clip file whose speech features are used directly.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Guide {
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    duration_seconds: Option<f64>,
    #[arg(long)]
    overlap_frames: Option<usize>,
}

#[derive(Debug, Args)]
struct Sample {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    speech: SpeechInput,
    #[command(flatten)]
    guide: Guide,
    #[arg(long, default_value_t = 0)]
    identity: usize,
    #[arg(long, default_value_t = 0)]
    emotion: usize,
}

#[derive(Debug, Args)]
struct StyleEdit {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    speech: SpeechInput,
    #[command(flatten)]
    guide: Guide,
    /// Comma-separated identity ids.
    #[arg(long, value_delimiter = ',', required = true)]
    identity: Vec<usize>,
    /// Comma-separated emotion ids.
    #[arg(long, value_delimiter = ',', required = true)]
    emotion: Vec<usize>,
}

#[derive(Debug, Args)]
struct Evaluate {
    #[command(flatten)]
    common: Common,
    /// Corpus directory; its train split fits the metrics autoencoder.
    #[arg(long)]
    data: PathBuf,
    /// Generate test windows with this checkpoint.
    #[arg(long, conflicts_with = "generated")]
    checkpoint: Option<PathBuf>,
    /// Directory of generated clip files, paired by name with `--reference`.
    #[arg(long, requires = "reference")]
    generated: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    omega: Option<f64>,
}

#[derive(Debug, Args)]
struct ExportLatents {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Also encode the clip files in this directory.
    #[arg(long)]
    generated: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print a one-line diagnostic to stderr.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Outcome<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Sample(a) => sample(a, argv),
        Command::Evaluate(a) => evaluate_cmd(a, argv),
        Command::StyleEdit(a) => style_edit(a, argv),
        Command::ExportLatents(a) => export_latents(a, argv),
    }
}

/// `--config` (or `base`), then `--seed`, then each `--set`.
fn resolve_config(common: &Common, base: Option<&Config>) -> Outcome<Config> {
    let mut config = match (&common.config, base) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(b)) => b.clone(),
        (None, None) => Config::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    for kv in &common.set {
        config.set(kv)?;
    }
    Ok(config)
}

fn apply_guide(config: &mut Config, guide: &Guide) {
    if let Some(o) = guide.omega {
        config.sampling.omega = o;
    }
    if let Some(k) = guide.overlap_frames {
        config.sampling.overlap_frames = k;
    }
}

/// Keeps the sections a checkpoint was trained with.
fn pin_to_checkpoint(config: &mut Config, ck: &Checkpoint) {
    config.model = ck.config.model.clone();
    config.diffusion = ck.config.diffusion.clone();
    config.features = ck.config.features.clone();
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    config: &'a str,
    version: &'a str,
    outputs: Vec<String>,
}

fn write_run_manifest(out: &Path, command: &str, argv: &[String], config: &Config, outputs: Vec<String>) -> Outcome<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let toml = out.join(RESOLVED_CONFIG);
    std::fs::write(&toml, config.to_toml_string()).map_err(|e| Error::Io { path: toml.clone(), source: e })?;
    let manifest = RunManifest { command, argv, seed: config.seed, config: RESOLVED_CONFIG, version: env!("CARGO_PKG_VERSION"), outputs };
    let path = out.join(RUN_MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn gen_data(a: GenData, argv: &[String]) -> Outcome<()> {
    let config = resolve_config(&a.common, None)?;
    config.validate()?;
    let m = generate_toy_corpus(&config.data.recipe, &config.features, config.data.n_clips, config.seed, &a.common.out)?;
    let [tr, va, te] = m.split_counts();
    println!("wrote {} clips (train {tr}, val {va}, test {te}) to {}", m.clips.len(), a.common.out.display());
    write_run_manifest(&a.common.out, "gen-data", argv, &config, vec!["manifest.json".into()])
}

/// Adopts the corpus feature layout and skeleton size.
fn fit_to_corpus(config: &mut Config, corpus: &Corpus) {
    config.features = corpus.manifest.features.clone();
    config.model.joints = corpus.manifest.joints;
}

fn train(a: Train, argv: &[String]) -> Outcome<()> {
    let corpus = load_corpus(&a.data)?;
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut config = resolve_config(&a.common, resumed.as_ref().map(|c| &c.config))?;
    fit_to_corpus(&mut config, &corpus);
    if let Some(ck) = &resumed {
        pin_to_checkpoint(&mut config, ck);
    }
    config.validate()?;
    let state = match &resumed {
        Some(ck) => TrainState::from_checkpoint(ck),
        None => TrainState::fitted(&config, &corpus.split_clips(Split::Train))?,
    };
    write_run_manifest(&a.common.out, "train", argv, &config, vec![FINAL_CHECKPOINT.into(), "train_log.jsonl".into()])?;
    let report_every = (config.training.steps / 20).max(1);
    let state = fit_from(state, &corpus, &config, Some(&a.common.out), |r| {
        if r.step % report_every == 0 {
            println!("step {} loss {:.6}", r.step, r.loss.total);
        }
    })?;
    println!("trained {} steps; checkpoint {}", state.step, a.common.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn read_tokens(path: &Path, frames: usize) -> Outcome<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let ids: Vec<u32> = text
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Data(format!("bad token id {t:?} in {}", path.display()))))
        .collect::<Result<_, _>>()?;
    if ids.is_empty() {
        return Err(Error::Data(format!("{} holds no tokens", path.display())).into());
    }
    Ok((0..frames).map(|n| ids[(n * ids.len() / frames).min(ids.len() - 1)]).collect())
}

/// Reads a clip file; style comes from a sibling sidecar when present.
fn read_clip_file(path: &Path, fps: f64) -> Outcome<ClipRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    let style = std::fs::read(path.with_extension("json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<SampleSidecar>(&b).ok())
        .map_or(StyleLabel::new(0, 0), |s| s.style);
    Ok(decode_clip(&bytes, &stem, style, fps)?)
}

fn load_speech(input: &SpeechInput, config: &Config) -> Outcome<SpeechFeatureSequence> {
    match (&input.audio, &input.features) {
        (Some(wav), None) => {
            let wave = Waveform::read_wav(wav)?;
            let f = &config.features;
            if wave.sample_rate() != f.sample_rate {
                return Err(Error::Data(format!("audio is {} Hz, model expects {} Hz", wave.sample_rate(), f.sample_rate)).into());
            }
            let frames = ((wave.duration_seconds() * f.fps).round() as usize).max(1);
            let tokens = match &input.tokens {
                Some(p) => read_tokens(p, frames)?,
                None => vec![0; frames],
            };
            Ok(SpeechFeaturizer::from_config(f).featurize(&wave, &tokens)?.0)
        }
        (None, Some(clip)) => Ok(read_clip_file(clip, config.features.fps)?.speech),
        _ => Err(Failure::Usage("give exactly one of --audio or --features".into())),
    }
}

/// Speech padded or trimmed to the requested duration.
fn requested_speech(speech: SpeechFeatureSequence, guide: &Guide, fps: f64) -> Outcome<SpeechFeatureSequence> {
    match guide.duration_seconds {
        Some(s) if !(s > 0.0) || !s.is_finite() => Err(Failure::Usage("--duration-seconds must be positive".into())),
        Some(s) => {
            let frames = (s * fps).round() as usize;
            if frames < 1 {
                return Err(Failure::Usage("requested duration is shorter than one frame".into()));
            }
            Ok(fit_speech(&speech, frames)?)
        }
        None => Ok(speech),
    }
}

struct Generator {
    ck: Checkpoint,
    config: Config,
}

impl Generator {
    fn load(common: &Common, checkpoint: &Path, guide: &Guide) -> Outcome<Self> {
        let ck = load_checkpoint(checkpoint)?;
        let mut config = resolve_config(common, Some(&ck.config))?;
        pin_to_checkpoint(&mut config, &ck);
        apply_guide(&mut config, guide);
        config.validate()?;
        Ok(Self { ck, config })
    }

    fn generate(&self, speech: &SpeechFeatureSequence, style: StyleLabel, checkpoint: &Path) -> Outcome<(MotionSequence, SampleSidecar)> {
        let s = &self.config.sampling;
        let req = GenerationRequest {
            speech: speech.clone(),
            style,
            guidance: Guidance::from_config(s),
            overlap: s.overlap_frames,
            clip_len: s.clip_len,
            seed: self.config.seed,
        };
        let out = generate_long(&self.ck.params, &schedule(&self.config)?, &req)?;
        let fps = self.config.features.fps;
        let motion = MotionSequence::new(out.frames, self.config.model.joints, fps)?;
        let sidecar = SampleSidecar {
            style,
            omega: s.omega,
            mask_speech_unconditional: s.mask_speech_unconditional,
            seed: self.config.seed,
            frames: motion.len(),
            fps,
            clip_len: out.plan.clip_len,
            overlap_frames: out.plan.overlap,
            clips: out.plan.clips(),
            denoiser_evaluations: out.counter,
            checkpoint: Some(checkpoint.display().to_string()),
        };
        Ok((motion, sidecar))
    }
}

fn sample(a: Sample, argv: &[String]) -> Outcome<()> {
    let g = Generator::load(&a.common, &a.checkpoint, &a.guide)?;
    let speech = requested_speech(load_speech(&a.speech, &g.config)?, &a.guide, g.config.features.fps)?;
    let style = StyleLabel::new(a.identity, a.emotion);
    let (motion, sidecar) = g.generate(&speech, style, &a.checkpoint)?;
    write_generated(&a.common.out, "sample", motion, speech, &sidecar)?;
    println!("wrote {} frames from {} clip(s) to {}", sidecar.frames, sidecar.clips, a.common.out.join("sample.clip").display());
    write_run_manifest(&a.common.out, "sample", argv, &g.config, vec!["sample.clip".into(), "sample.json".into()])
}

fn style_edit(a: StyleEdit, argv: &[String]) -> Outcome<()> {
    let g = Generator::load(&a.common, &a.checkpoint, &a.guide)?;
    let speech = requested_speech(load_speech(&a.speech, &g.config)?, &a.guide, g.config.features.fps)?;
    let mut outputs = Vec::new();
    for &id in &a.identity {
        for &emo in &a.emotion {
            let (motion, sidecar) = g.generate(&speech, StyleLabel::new(id, emo), &a.checkpoint)?;
            let name = format!("id{id}_emo{emo}");
            write_generated(&a.common.out, &name, motion, speech.clone(), &sidecar)?;
            outputs.push(format!("{name}.clip"));
        }
    }
    println!("wrote {} style edits to {}", outputs.len(), a.common.out.display());
    write_run_manifest(&a.common.out, "style-edit", argv, &g.config, outputs)
}

fn clip_files(dir: &Path) -> Outcome<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut files: Vec<PathBuf> =
        rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "clip")).collect();
    files.sort();
    Ok(files)
}

fn file_safe(id: &str) -> String {
    id.replace('@', "_")
}

fn evaluate_cmd(a: Evaluate, argv: &[String]) -> Outcome<()> {
    let corpus = load_corpus(&a.data)?;
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut config = resolve_config(&a.common, ck.as_ref().map(|c| &c.config))?;
    fit_to_corpus(&mut config, &corpus);
    if let Some(ck) = &ck {
        pin_to_checkpoint(&mut config, ck);
    }
    if let Some(o) = a.omega {
        config.sampling.omega = o;
    }
    config.validate()?;
    let fps = corpus.manifest.fps;
    let (generated, reference, beats): (Vec<MotionSequence>, Vec<MotionSequence>, Vec<Vec<f64>>) = match (&ck, &a.generated, &a.reference) {
        (Some(ck), None, _) => {
            let m = &config.metrics;
            let windows = eval_windows(&corpus, Split::Test, m.eval_window_frames, m.eval_max_windows);
            let styles: Vec<StyleLabel> = windows.iter().map(|w| w.style).collect();
            let guidance = Guidance::from_config(&config.sampling);
            let (motions, _) = generate_windows(&ck.params, &schedule(&config)?, &windows, &styles, guidance, config.seed, 32)?;
            for (w, m) in windows.iter().zip(&motions) {
                let name = file_safe(&w.clip_id);
                let rec = ClipRecord { clip_id: name.clone(), motion: m.clone(), speech: w.speech.clone(), style: w.style };
                write_clip(&a.common.out.join("generated").join(format!("{name}.clip")), &rec)?;
                write_clip(&a.common.out.join("reference").join(format!("{name}.clip")), w)?;
            }
            let beats = windows.iter().map(|w| window_beats(&corpus, w)).collect();
            (motions, windows.into_iter().map(|w| w.motion).collect(), beats)
        }
        (None, Some(gen_dir), Some(ref_dir)) => {
            let (gf, rf) = (clip_files(gen_dir)?, clip_files(ref_dir)?);
            let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().map(|n| n.to_owned())).collect::<Vec<_>>();
            if gf.is_empty() || names(&gf) != names(&rf) {
                return Err(Error::Data("generated and reference directories must hold the same clip file names".into()).into());
            }
            let (mut g, mut r, mut b) = (Vec::new(), Vec::new(), Vec::new());
            for (gp, rp) in gf.iter().zip(&rf) {
                let rec = read_clip_file(rp, fps)?;
                b.push(speech_beats(&rec.speech, &config.features));
                r.push(rec.motion);
                g.push(read_clip_file(gp, fps)?.motion);
            }
            (g, r, b)
        }
        _ => return Err(Failure::Usage("give --checkpoint, or --generated with --reference".into())),
    };
    let ae = train_metric_autoencoder(&corpus, &config)?;
    let gr: Vec<&MotionSequence> = generated.iter().collect();
    let rr: Vec<&MotionSequence> = reference.iter().collect();
    let report: MetricsReport = evaluate(&gr, &rr, &beats, &ae, &config.metrics, config.seed)?;
    report.write(&a.common.out)?;
    println!("{}", MetricsReport::table_header());
    println!("{}", report.table_row());
    write_run_manifest(&a.common.out, "evaluate", argv, &config, vec!["report.json".into(), "report.txt".into()])
}

fn export_latents(a: ExportLatents, argv: &[String]) -> Outcome<()> {
    let corpus = load_corpus(&a.data)?;
    let mut config = resolve_config(&a.common, None)?;
    fit_to_corpus(&mut config, &corpus);
    config.validate()?;
    let ae = train_metric_autoencoder(&corpus, &config)?;
    let mut rows: Vec<(String, String, StyleLabel, Vec<f64>)> = Vec::new();
    for (entry, clip) in corpus.manifest.clips.iter().zip(&corpus.clips) {
        let split = format!("{:?}", entry.split).to_lowercase();
        rows.push((clip.clip_id.clone(), split, clip.style, ae.encode(&clip.motion)?));
    }
    if let Some(dir) = &a.generated {
        for path in clip_files(dir)? {
            let rec = read_clip_file(&path, corpus.manifest.fps)?;
            rows.push((rec.clip_id.clone(), "generated".into(), rec.style, ae.encode(&rec.motion)?));
        }
    }
    let dim = ae.latent_dim();
    let mut csv = String::from("clip_id,split,identity_id,emotion_id");
    for k in 0..dim {
        csv.push_str(&format!(",z{k}"));
    }
    csv.push('\n');
    for (id, split, style, z) in &rows {
        csv.push_str(&format!("{id},{split},{},{}", style.identity_id, style.emotion_id));
        for v in z {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(&a.common.out).map_err(|e| Error::Io { path: a.common.out.clone(), source: e })?;
    let path = a.common.out.join("latents.csv");
    std::fs::write(&path, csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!("wrote {} latents of dimension {dim} to {}", rows.len(), path.display());
    write_run_manifest(&a.common.out, "export-latents", argv, &config, vec!["latents.csv".into()])
}
