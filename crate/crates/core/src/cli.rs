//! Command-line entry points. Each `cmd_*` function is callable directly
//! (tests use them); `main.rs` only parses flags and maps errors to exit
//! codes: 0 success, 1 user error, 2 internal error.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::audio::{load_wav, resample, save_wav, Waveform, CANONICAL_RATE};
use crate::checkpoint::Checkpoint;
use crate::databus::{make_dataset, write_jsonl, Corpus, DatasetManifest, Gamma, QuadFactory, QuadRecord};
use crate::metrics::{eval_conversion, eval_dereverb, format_table, results_to_map, write_report, DerevItem, PesqCommand, ReportRow};
use crate::model::{ModelConfig, ModelParams};
use crate::reverb::{preset_bank, PresetSpace, Split};
use crate::stft::Stft;
use crate::training::{train, TrainConfig, TrainData};
use crate::{Error, Result};

pub const TRAIN_PRESETS: usize = 36;
pub const VAL_PRESETS: usize = 4;
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Parser)]
#[command(name = "reverbswap", version, about = "Reverb conversion between vocal tracks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Freeze reverb presets and draw training/validation quad manifests.
    SynthData(SynthDataArgs),
    /// Train (or resume) a model from a quad manifest.
    Train(TrainArgs),
    /// Apply the reverb of a reference track to an input track.
    Convert(ConvertArgs),
    /// Remove reverb by converting against a dry reference vocal.
    Dereverb(DereverbArgs),
    /// Score a checkpoint on a validation manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// 2x1024x640 input, channels 32..512.
    #[default]
    Full,
    /// 2x128x96 input, channels 4..64 (desk-scale experiments).
    Reduced,
}

impl ModelSize {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelSize::Full => ModelConfig::default(),
            ModelSize::Reduced => ModelConfig::reduced(),
        }
    }

    pub fn clip_frames(self) -> usize {
        let c = self.config();
        c.stft_config().samples_for_frames(c.time_frames)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthDataArgs {
    /// Directory of dry vocal WAVs.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training manifest path; the validation manifest and preset files are
    /// written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub quads: usize,
    #[arg(long, default_value_t = 16)]
    pub val_quads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip length follows the model input size.
    #[arg(long, value_enum, default_value_t = ModelSize::Full)]
    pub model: ModelSize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub adv_start: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep rendered spectrograms in memory (implies fixed gammas are cheap).
    #[arg(long)]
    pub cache: bool,
    /// Keep each quad's gammas fixed instead of redrawing them every epoch.
    #[arg(long)]
    pub fixed_gamma: bool,
    #[arg(long, value_enum, default_value_t = ModelSize::Full)]
    pub model: ModelSize,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub allow_resample: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub allow_resample: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DereverbArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Any reverb-free vocal recording.
    #[arg(long)]
    pub dry_ref: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub allow_resample: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Conversion,
    Dereverb,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub val_manifest: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Report path stem; `.txt` and `.jsonl` are written.
    #[arg(long)]
    pub out: PathBuf,
    /// External PESQ scorer, called as `<cmd> ref.wav deg.wav`.
    #[arg(long)]
    pub pesq_cmd: Option<String>,
    #[arg(long)]
    pub allow_resample: bool,
}

/// Plain-text run log: every line goes to stderr and, if set, a file.
pub struct RunLog {
    file: Option<std::fs::File>,
    quiet: bool,
}

impl RunLog {
    pub fn stderr() -> Self {
        Self { file: None, quiet: false }
    }

    /// Collects nothing and prints nothing.
    pub fn quiet() -> Self {
        Self { file: None, quiet: true }
    }

    pub fn to_file(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.file = Some(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
        Ok(())
    }

    pub fn line(&mut self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{msg}");
        }
    }

    fn echo<T: Serialize>(&mut self, what: &str, cfg: &T) {
        let text = toml::to_string(cfg).unwrap_or_else(|e| format!("<unprintable: {e}>"));
        self.line(&format!("effective {what} config:\n{}", text.trim_end()));
    }
}

pub fn run(cli: Cli, log: &mut RunLog) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(&a, log).map(|_| ()),
        Command::Train(a) => cmd_train(&a, log).map(|_| ()),
        Command::Convert(a) => cmd_convert(&a, log),
        Command::Dereverb(a) => cmd_dereverb(&a, log),
        Command::Evaluate(a) => cmd_evaluate(&a, log).map(|_| ()),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I, log: &mut RunLog) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, log) {
        Ok(()) => 0,
        Err(e) => {
            log.line(&format!("error: {e}"));
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

/// Paths written by `synth-data`.
#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub train_presets: PathBuf,
    pub val_presets: PathBuf,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_synth_data(a: &SynthDataArgs, log: &mut RunLog) -> Result<SynthOutputs> {
    log.echo("synth-data", a);
    let clip = a.model.clip_frames();
    let corpus = Corpus::scan_dir(&a.corpus)?;
    let long_enough = corpus.entries.iter().filter(|e| e.frames >= clip).count();
    if long_enough < 2 {
        return Err(Error::Manifest(format!(
            "corpus {} needs at least two dry WAVs of {clip} frames or more ({:.2} s at 44.1 kHz), found {long_enough}",
            a.corpus.display(),
            clip as f64 / CANONICAL_RATE as f64
        )));
    }
    let train_presets = preset_bank(&PresetSpace::train(), TRAIN_PRESETS);
    let val_presets = preset_bank(&PresetSpace::validation(), VAL_PRESETS);
    let manifest = |split, presets: &[_], n, seed| -> Result<DatasetManifest> {
        Ok(DatasetManifest {
            format_version: DatasetManifest::FORMAT_VERSION,
            seed,
            split,
            clip_frames: clip,
            sample_rate: CANONICAL_RATE,
            presets: presets.to_vec(),
            quads: make_dataset(&corpus, presets, n, seed, clip)?,
        })
    };
    let train_m = manifest(Split::Train, &train_presets, a.quads, a.seed)?;
    let val_m = manifest(Split::Val, &val_presets, a.val_quads, a.seed.wrapping_add(1))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let out = SynthOutputs {
        train_manifest: a.out.clone(),
        val_manifest: sibling(&a.out, "_val.json"),
        train_presets: sibling(&a.out, "_presets_train.jsonl"),
        val_presets: sibling(&a.out, "_presets_val.jsonl"),
    };
    train_m.write(&out.train_manifest)?;
    val_m.write(&out.val_manifest)?;
    write_jsonl(&out.train_presets, &train_presets)?;
    write_jsonl(&out.val_presets, &val_presets)?;
    log.line(&format!(
        "wrote {} training quads to {}, {} validation quads to {}",
        train_m.quads.len(),
        out.train_manifest.display(),
        val_m.quads.len(),
        out.val_manifest.display()
    ));
    Ok(out)
}

/// Config file values, then flag overrides.
pub fn effective_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.clone()),
                _ => Error::Io(e),
            })?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = a.adv_start {
        cfg.adv_start_epoch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.steps_per_epoch = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.cache {
        cfg.cache_quads = true;
    }
    if a.fixed_gamma {
        cfg.redraw_gamma = false;
    }
    // a short run should still be valid with the default adversarial start
    if a.adv_start.is_none() && cfg.adv_start_epoch > cfg.total_epochs {
        cfg.adv_start_epoch = cfg.total_epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, log: &mut RunLog) -> Result<crate::training::TrainSummary> {
    std::fs::create_dir_all(&a.out)?;
    log.to_file(&a.out.join(RUN_LOG))?;
    let cfg = effective_train_config(a)?;
    log.echo("train", &cfg);
    let manifest = DatasetManifest::read(&a.manifest)?;
    let model = a.model.config();
    if manifest.clip_frames != a.model.clip_frames() {
        return Err(Error::Manifest(format!(
            "manifest clips are {} frames but the {:?} model needs {}; regenerate with the same --model",
            manifest.clip_frames,
            a.model,
            a.model.clip_frames()
        )));
    }
    let mut data = TrainData::from_manifest(&manifest, &model, a.allow_resample)?;
    let summary = train(&mut data, &model, &cfg, &a.out, a.resume, &mut |m| log.line(m))?;
    log.line(&format!(
        "finished {} epochs, last checkpoint {}",
        summary.epochs_completed,
        summary.last_checkpoint.display()
    ));
    Ok(summary)
}

/// Runs the model over `input` in non-overlapping segments of one model
/// input each, cycling `reference` segments, and rebuilds audio from the
/// output magnitude and the input phase. Both must be stereo at the same
/// rate; the result has the input's length.
pub fn convert_audio(params: &ModelParams, input: &Waveform, reference: &Waveform) -> Result<Waveform> {
    if input.sample_rate() != reference.sample_rate() || input.channels() != reference.channels() {
        return Err(Error::Shape(format!(
            "input is {} ch at {} Hz, reference is {} ch at {} Hz",
            input.channels(),
            input.sample_rate(),
            reference.channels(),
            reference.sample_rate()
        )));
    }
    if input.frames() == 0 || reference.frames() == 0 {
        return Err(Error::InvalidWaveform("empty input or reference".into()));
    }
    let stft = Stft::new(params.config.stft_config())?;
    let seg = stft.config().samples_for_frames(params.config.time_frames);
    let n_in = input.frames().div_ceil(seg);
    let n_ref = reference.frames().div_ceil(seg);
    let mut out = ndarray::Array2::zeros((input.channels(), n_in * seg));
    for i in 0..n_in {
        let a = input.slice_padded(i * seg, seg);
        let b = reference.slice_padded((i % n_ref) * seg, seg);
        let (mag_a, phase_a) = stft.analyze(&a)?;
        let (mag_b, _) = stft.analyze(&b)?;
        let (oa, _) = params.convert_batch(&params.to_input(&mag_a)?, &params.to_input(&mag_b)?)?;
        let mag = params.to_magnitude(oa)?;
        let w = stft.synthesize(&mag, &phase_a, seg, input.sample_rate())?;
        out.slice_mut(ndarray::s![.., i * seg..(i + 1) * seg]).assign(w.samples());
    }
    Ok(Waveform::new(out, input.sample_rate())?.with_len(input.frames()))
}

/// Loads, converts and writes back in the input's rate and channel count.
fn convert_files(input: &Path, reference: &Path, ckpt: &Path, out: &Path, allow_resample: bool, log: &mut RunLog) -> Result<()> {
    let params = Checkpoint::load(ckpt)?.params()?;
    let raw = load_wav(input)?;
    let prep = |w: Waveform| -> Result<Waveform> {
        let w = if w.sample_rate() == CANONICAL_RATE {
            w
        } else if allow_resample {
            resample(&w, CANONICAL_RATE)?
        } else {
            return Err(Error::RateMismatch {
                expected: CANONICAL_RATE,
                found: w.sample_rate(),
            });
        };
        Ok(w.to_stereo())
    };
    let a = prep(raw.clone())?;
    let b = prep(load_wav(reference)?)?;
    let y = convert_audio(&params, &a, &b)?;
    let y = if raw.sample_rate() == CANONICAL_RATE {
        y
    } else {
        resample(&y, raw.sample_rate())?.with_len(raw.frames())
    };
    let y = if raw.channels() == 1 { y.to_mono() } else { y };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_wav(&y, out)?;
    log.line(&format!("wrote {} ({:.2} s)", out.display(), y.duration_secs()));
    Ok(())
}

pub fn cmd_convert(a: &ConvertArgs, log: &mut RunLog) -> Result<()> {
    log.echo("convert", a);
    convert_files(&a.input, &a.reference, &a.ckpt, &a.out, a.allow_resample, log)
}

pub fn cmd_dereverb(a: &DereverbArgs, log: &mut RunLog) -> Result<()> {
    log.echo("dereverb", a);
    let dry = a.dry_ref.as_ref().ok_or_else(|| {
        Error::InvalidArgument(
            "--dry-ref is required: supply any dry (reverb-free) vocal recording; its content does not matter, only that it has no reverb".into(),
        )
    })?;
    convert_files(&a.input, dry, &a.ckpt, &a.out, a.allow_resample, log)
}

/// Gammas of the de-reverberation sweep: 0.1 to 0.7 in grid steps.
pub fn dereverb_gammas() -> Vec<Gamma> {
    Gamma::grid().filter(|g| (2..=14).contains(&g.steps())).collect()
}

/// Evaluation excerpts span whole model segments and at least this long, so
/// intelligibility metrics see enough active frames even for small models.
pub const MIN_EVAL_SECS: f64 = 1.0;

/// Factory rendering evaluation-length excerpts, with offsets pulled back
/// where an excerpt would run past the end of a source.
fn eval_quads(manifest: &DatasetManifest, clip: usize, allow_resample: bool) -> Result<(QuadFactory, Vec<QuadRecord>)> {
    let min = (MIN_EVAL_SECS * manifest.sample_rate as f64).ceil() as usize;
    let len = clip * min.div_ceil(clip).max(1);
    let mut factory = QuadFactory::new(&manifest.presets, len).allow_resample(allow_resample);
    let mut quads = Vec::with_capacity(manifest.quads.len());
    for r in &manifest.quads {
        let fa = factory.source(&r.source_a)?.frames();
        let shortest = fa.min(factory.source(&r.source_b)?.frames());
        if shortest < len {
            return Err(Error::Manifest(format!(
                "quad {}: sources have {shortest} frames, evaluation needs {len}",
                r.quad_id
            )));
        }
        quads.push(QuadRecord {
            segment_offset: r.segment_offset.min(shortest - len),
            ..r.clone()
        });
    }
    Ok((factory, quads))
}

pub fn cmd_evaluate(a: &EvaluateArgs, log: &mut RunLog) -> Result<Vec<ReportRow>> {
    log.echo("evaluate", a);
    let params = Checkpoint::load(&a.ckpt)?.params()?;
    let manifest = DatasetManifest::read(&a.val_manifest)?;
    if manifest.quads.is_empty() {
        return Err(Error::Manifest(format!("{} has no quads", a.val_manifest.display())));
    }
    let clip = params.config.stft_config().samples_for_frames(params.config.time_frames);
    if manifest.clip_frames != clip {
        return Err(Error::Manifest(format!(
            "manifest clips are {} frames, the checkpoint model expects {clip}",
            manifest.clip_frames
        )));
    }
    let pesq = a.pesq_cmd.as_deref().map(PesqCommand::parse).transpose()?;
    if pesq.is_none() {
        log.line("no PESQ scorer configured; PESQ reported as n/a");
    }
    let (mut factory, quads) = eval_quads(&manifest, clip, a.allow_resample)?;
    let rows = match a.mode {
        EvalMode::Conversion => {
            let (mut input, mut model) = (Vec::new(), Vec::new());
            for rec in &quads {
                let q = factory.build(rec)?;
                let out = convert_audio(&params, &q.in_a.audio, &q.in_b.audio)?;
                let id = format!("quad{}", rec.quad_id);
                input.push(results_to_map(&eval_conversion(&q.in_a.audio, &q.gt_a.audio, &id, pesq.as_ref())?));
                model.push(results_to_map(&eval_conversion(&out, &q.gt_a.audio, &id, pesq.as_ref())?));
            }
            vec![ReportRow::aggregate("input", None, &input), ReportRow::aggregate("model", None, &model)]
        }
        EvalMode::Dereverb => {
            let mut items = Vec::new();
            for rec in &quads {
                for g in dereverb_gammas() {
                    let r = QuadRecord {
                        gamma_1: g,
                        gamma_2: Gamma::DRY,
                        ..rec.clone()
                    };
                    let q = factory.build(&r)?;
                    let output = convert_audio(&params, &q.in_a.audio, &q.in_b.audio)?;
                    items.push(DerevItem {
                        clip_id: format!("quad{}", rec.quad_id),
                        gamma: g.value(),
                        input: q.in_a.audio,
                        output,
                        dry: q.gt_a.audio,
                    });
                }
            }
            eval_dereverb(&items, pesq.as_ref())?
        }
    };
    write_report(&rows, &a.out)?;
    log.line(&format_table(&rows));
    Ok(rows)
}
