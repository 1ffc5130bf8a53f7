//! Reverb-bus mixing and training-quad assembly.
//!
//! A mixed track is `(src + gamma * rev) / (gamma + 1)`: the dry source plus
//! its fully wet render at bus send ratio `gamma`, normalised so the weights
//! sum to one.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audio::{load_canonical, Waveform};
use crate::error::{Error, Result};
use crate::reverb::{render_wet, ReverbPreset, Split};

/// Identifier used for the "no reverb" reference of a de-reverberation pair.
pub const DRY_PRESET_ID: &str = "dry";

/// Bus send ratio on the 5 % grid `0.00, 0.05, ..., 0.75`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Gamma(u8);

impl Gamma {
    pub const STEPS: u8 = 15;
    pub const DRY: Gamma = Gamma(0);

    pub fn from_steps(steps: u8) -> Result<Self> {
        if steps > Self::STEPS {
            return Err(Error::InvalidArgument(format!(
                "gamma step {steps} exceeds the 0.75 ceiling"
            )));
        }
        Ok(Self(steps))
    }

    /// Snaps `value` to the grid; values off the grid by more than 1e-6 are rejected.
    pub fn from_value(value: f64) -> Result<Self> {
        let steps = (value * 20.0).round();
        if !(0.0..=Self::STEPS as f64).contains(&steps) || (steps / 20.0 - value).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "gamma {value} is not on the 0.05 grid within [0, 0.75]"
            )));
        }
        Ok(Self(steps as u8))
    }

    pub fn steps(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 20.0
    }

    pub fn grid() -> impl Iterator<Item = Gamma> {
        (0..=Self::STEPS).map(Gamma)
    }

    fn draw(rng: &mut impl Rng) -> Self {
        Gamma(rng.gen_range(0..=Self::STEPS))
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Gamma::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// `(source weight, reverb weight)` of the bus mix.
pub fn bus_weights(gamma: f64) -> (f64, f64) {
    (1.0 / (gamma + 1.0), gamma / (gamma + 1.0))
}

/// `(src + gamma * rev) / (gamma + 1)`, sample by sample.
pub fn mix_bus(src: &Waveform, rev: &Waveform, gamma: f64) -> Result<Waveform> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gamma must be finite and non-negative, got {gamma}"
        )));
    }
    src.ensure_same_layout(rev)?;
    if gamma == 0.0 {
        return Ok(src.clone());
    }
    let norm = gamma + 1.0;
    let mixed = (src.samples() + &(rev.samples() * gamma)) / norm;
    Waveform::new(mixed, src.sample_rate())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MixSpec {
    pub source_id: String,
    pub preset_id: String,
    pub gamma: Gamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedTrack {
    pub spec: MixSpec,
    pub audio: Waveform,
}

/// `in_a = s_a r_1`, `in_b = s_b r_2`, `gt_a = s_a r_2`, `gt_b = s_b r_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingQuad {
    pub in_a: MixedTrack,
    pub in_b: MixedTrack,
    pub gt_a: MixedTrack,
    pub gt_b: MixedTrack,
}

impl TrainingQuad {
    /// Checks the shared-source / shared-reverb bookkeeping.
    pub fn check_invariants(&self) -> Result<()> {
        let ok = self.in_a.spec.source_id == self.gt_a.spec.source_id
            && self.in_b.spec.source_id == self.gt_b.spec.source_id
            && self.in_a.spec.preset_id == self.gt_b.spec.preset_id
            && self.in_a.spec.gamma == self.gt_b.spec.gamma
            && self.in_b.spec.preset_id == self.gt_a.spec.preset_id
            && self.in_b.spec.gamma == self.gt_a.spec.gamma;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("quad metadata is inconsistent".into()))
        }
    }

    /// The quad seen from the other side: `(a, r1) <-> (b, r2)`.
    pub fn swapped(&self) -> TrainingQuad {
        TrainingQuad {
            in_a: self.in_b.clone(),
            in_b: self.in_a.clone(),
            gt_a: self.gt_b.clone(),
            gt_b: self.gt_a.clone(),
        }
    }
}

/// A dry source clip with its identifier.
#[derive(Debug, Clone, Copy)]
pub struct DryClip<'a> {
    pub id: &'a str,
    pub audio: &'a Waveform,
}

fn mixed(
    clip: DryClip<'_>,
    wet: &Waveform,
    preset_id: &str,
    gamma: Gamma,
) -> Result<MixedTrack> {
    Ok(MixedTrack {
        spec: MixSpec {
            source_id: clip.id.to_string(),
            preset_id: preset_id.to_string(),
            gamma,
        },
        audio: mix_bus(clip.audio, wet, gamma.value())?,
    })
}

/// Renders both sources through both presets and forms the four mixtures.
pub fn build_quad(
    a: DryClip<'_>,
    b: DryClip<'_>,
    p1: &ReverbPreset,
    p2: &ReverbPreset,
    gamma_1: Gamma,
    gamma_2: Gamma,
) -> Result<TrainingQuad> {
    a.audio.ensure_same_layout(b.audio)?;
    let rev_a1 = render_wet(a.audio, p1)?;
    let rev_b2 = render_wet(b.audio, p2)?;
    let rev_a2 = if p1 == p2 { rev_a1.clone() } else { render_wet(a.audio, p2)? };
    let rev_b1 = if p1 == p2 { rev_b2.clone() } else { render_wet(b.audio, p1)? };
    let quad = TrainingQuad {
        in_a: mixed(a, &rev_a1, &p1.preset_id, gamma_1)?,
        in_b: mixed(b, &rev_b2, &p2.preset_id, gamma_2)?,
        gt_a: mixed(a, &rev_a2, &p2.preset_id, gamma_2)?,
        gt_b: mixed(b, &rev_b1, &p1.preset_id, gamma_1)?,
    };
    quad.check_invariants()?;
    Ok(quad)
}

/// Pairs `input` with a dry reference (`gamma = 0`); converting the pair
/// asks the model to remove the reverb from `input`.
pub fn make_derev_pair(input: &MixedTrack, dry_ref: DryClip<'_>) -> Result<(MixedTrack, MixedTrack)> {
    input.audio.ensure_same_layout(dry_ref.audio)?;
    let reference = MixedTrack {
        spec: MixSpec {
            source_id: dry_ref.id.to_string(),
            preset_id: DRY_PRESET_ID.to_string(),
            gamma: Gamma::DRY,
        },
        audio: dry_ref.audio.clone(),
    };
    Ok((input.clone(), reference))
}

/// One line of a dataset manifest: a lazily rendered quad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadRecord {
    pub quad_id: usize,
    pub source_a: String,
    pub source_b: String,
    pub preset_1: String,
    pub preset_2: String,
    pub gamma_1: Gamma,
    pub gamma_2: Gamma,
    /// Frame offset of the clip inside both sources.
    pub segment_offset: usize,
    pub seed: u64,
}

impl QuadRecord {
    /// Redraws both gammas for `epoch` from the record's seed; epoch 0 is
    /// the record as written.
    pub fn for_epoch(&self, epoch: usize) -> QuadRecord {
        if epoch == 0 {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        QuadRecord {
            gamma_1: Gamma::draw(&mut rng),
            gamma_2: Gamma::draw(&mut rng),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub id: String,
    pub path: PathBuf,
    pub frames: usize,
}

/// Dry source files, stored on disk as one path per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    /// All `.wav` files directly under `dir`, sorted by file name.
    pub fn scan_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.to_path_buf()));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        Self::from_paths(paths)
    }

    pub fn from_paths(paths: impl IntoIterator<Item = PathBuf>) -> Result<Self> {
        let entries = paths
            .into_iter()
            .map(|path| {
                if !path.exists() {
                    return Err(Error::MissingFile(path));
                }
                let frames = hound::WavReader::open(&path)?.duration() as usize;
                let id = path.to_string_lossy().into_owned();
                Ok(CorpusEntry { id, path, frames })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            writeln!(w, "{}", e.path.display())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a newline-delimited list; relative paths resolve against the
    /// manifest's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let paths = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let p = PathBuf::from(l);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            });
        Self::from_paths(paths)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Draws `count` quad descriptors. Sources within a quad differ, presets
/// come from `presets`, and both gammas are drawn independently from the grid.
pub fn make_dataset(
    corpus: &Corpus,
    presets: &[ReverbPreset],
    count: usize,
    seed: u64,
    clip_frames: usize,
) -> Result<Vec<QuadRecord>> {
    if corpus.is_empty() {
        return Err(Error::Manifest("empty corpus".into()));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if presets.is_empty() {
        return Err(Error::Manifest("no presets".into()));
    }
    let eligible: Vec<&CorpusEntry> = corpus.entries.iter().filter(|e| e.frames >= clip_frames).collect();
    if eligible.len() < 2 {
        return Err(Error::Manifest(format!(
            "need at least two sources of {clip_frames} frames or more, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..count)
        .map(|quad_id| {
            let ia = rng.gen_range(0..eligible.len());
            let mut ib = rng.gen_range(0..eligible.len() - 1);
            if ib >= ia {
                ib += 1;
            }
            let (a, b) = (eligible[ia], eligible[ib]);
            let p1 = &presets[rng.gen_range(0..presets.len())];
            let p2 = &presets[rng.gen_range(0..presets.len())];
            let gamma_1 = Gamma::draw(&mut rng);
            let gamma_2 = Gamma::draw(&mut rng);
            let room = a.frames.min(b.frames) - clip_frames;
            let segment_offset = rng.gen_range(0..=room);
            QuadRecord {
                quad_id,
                source_a: a.id.clone(),
                source_b: b.id.clone(),
                preset_1: p1.preset_id.clone(),
                preset_2: p2.preset_id.clone(),
                gamma_1,
                gamma_2,
                segment_offset,
                seed: rng.gen(),
            }
        })
        .collect();
    Ok(records)
}

/// Loads and caches dry sources, and renders quads from descriptors.
pub struct QuadFactory {
    presets: HashMap<String, ReverbPreset>,
    sources: HashMap<String, Waveform>,
    allow_resample: bool,
    clip_frames: usize,
}

impl QuadFactory {
    pub fn new(presets: &[ReverbPreset], clip_frames: usize) -> Self {
        Self {
            presets: presets.iter().map(|p| (p.preset_id.clone(), p.clone())).collect(),
            sources: HashMap::new(),
            allow_resample: false,
            clip_frames,
        }
    }

    pub fn allow_resample(mut self, yes: bool) -> Self {
        self.allow_resample = yes;
        self
    }

    /// Registers an in-memory source under `id` (bypasses disk).
    pub fn insert_source(&mut self, id: impl Into<String>, audio: Waveform) {
        self.sources.insert(id.into(), audio.to_stereo());
    }

    pub fn clip_frames(&self) -> usize {
        self.clip_frames
    }

    pub fn preset(&self, id: &str) -> Result<&ReverbPreset> {
        self.presets
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("unknown preset '{id}'")))
    }

    pub fn source(&mut self, id: &str) -> Result<&Waveform> {
        if !self.sources.contains_key(id) {
            let w = load_canonical(id, self.allow_resample)?;
            self.sources.insert(id.to_string(), w);
        }
        Ok(&self.sources[id])
    }

    pub fn clip(&mut self, id: &str, offset: usize) -> Result<Waveform> {
        let frames = self.clip_frames;
        let src = self.source(id)?;
        if offset + frames > src.frames() {
            return Err(Error::Manifest(format!(
                "source '{id}' has {} frames, clip needs {}",
                src.frames(),
                offset + frames
            )));
        }
        Ok(src.slice_padded(offset, frames))
    }

    pub fn build(&mut self, rec: &QuadRecord) -> Result<TrainingQuad> {
        let a = self.clip(&rec.source_a, rec.segment_offset)?;
        let b = self.clip(&rec.source_b, rec.segment_offset)?;
        let p1 = self.preset(&rec.preset_1)?.clone();
        let p2 = self.preset(&rec.preset_2)?.clone();
        build_quad(
            DryClip { id: &rec.source_a, audio: &a },
            DryClip { id: &rec.source_b, audio: &b },
            &p1,
            &p2,
            rec.gamma_1,
            rec.gamma_2,
        )
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Everything needed to regenerate a set of training or validation quads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub split: Split,
    pub clip_frames: usize,
    pub sample_rate: u32,
    pub presets: Vec<ReverbPreset>,
    pub quads: Vec<QuadRecord>,
}

impl DatasetManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    /// Every quad must reference a known preset.
    pub fn validate(&self) -> Result<()> {
        if self.format_version > Self::FORMAT_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", self.format_version)));
        }
        let known: std::collections::HashSet<&str> = self.presets.iter().map(|p| p.preset_id.as_str()).collect();
        for q in &self.quads {
            for id in [&q.preset_1, &q.preset_2] {
                if !known.contains(id.as_str()) {
                    return Err(Error::Manifest(format!("quad {} references unknown preset '{id}'", q.quad_id)));
                }
            }
        }
        Ok(())
    }

    pub fn factory(&self, allow_resample: bool) -> QuadFactory {
        QuadFactory::new(&self.presets, self.clip_frames).allow_resample(allow_resample)
    }
}
