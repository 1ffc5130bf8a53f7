//! PCM audio container and WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::{s, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Sample rate every model-facing component works at.
pub const CANONICAL_RATE: u32 = 44_100;

/// Largest value representable by a 16-bit code, as a float.
pub const MAX_16BIT: f64 = 1.0 - 1.0 / 32768.0;

/// Multi-channel audio, `[channels, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        let channels = samples.nrows();
        if !(1..=2).contains(&channels) {
            return Err(Error::InvalidWaveform(format!(
                "expected 1 or 2 channels, got {channels}"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let frames = channels.first().map(|c| c.len()).unwrap_or(0);
        if channels.iter().any(|c| c.len() != frames) {
            return Err(Error::InvalidWaveform("channels differ in length".into()));
        }
        let mut samples = Array2::zeros((channels.len(), frames));
        for (mut row, ch) in samples.outer_iter_mut().zip(channels) {
            row.assign(&ArrayView1::from(ch.as_slice()));
        }
        Self::new(samples, sample_rate)
    }

    pub fn silence(channels: usize, frames: usize, sample_rate: u32) -> Self {
        Self {
            samples: Array2::zeros((channels, frames)),
            sample_rate,
        }
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Array2<f64> {
        &mut self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channel(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.samples.row(idx)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn frames(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Duplicates a mono signal to two identical channels; stereo is returned unchanged.
    pub fn to_stereo(&self) -> Self {
        if self.channels() == 2 {
            return self.clone();
        }
        let row = self.samples.row(0);
        let mut samples = Array2::zeros((2, self.frames()));
        samples.row_mut(0).assign(&row);
        samples.row_mut(1).assign(&row);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Mid downmix `(L + R) / 2`, returned as a single channel.
    pub fn to_mono(&self) -> Self {
        let mono = self.samples.mean_axis(Axis(0)).expect("at least one channel");
        Self {
            samples: mono.insert_axis(Axis(0)),
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: &self.samples * gain,
            sample_rate: self.sample_rate,
        }
    }

    /// Frames `[start, start + len)`; zero-padded when the range runs past the end.
    pub fn slice_padded(&self, start: usize, len: usize) -> Self {
        let mut samples = Array2::zeros((self.channels(), len));
        let end = (start + len).min(self.frames());
        if start < end {
            samples
                .slice_mut(s![.., ..end - start])
                .assign(&self.samples.slice(s![.., start..end]));
        }
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or zero-pads to exactly `len` frames.
    pub fn with_len(&self, len: usize) -> Self {
        self.slice_padded(0, len)
    }

    pub fn ensure_same_layout(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.sample_rate,
                found: other.sample_rate,
            });
        }
        if self.samples.dim() != other.samples.dim() {
            return Err(Error::Shape(format!(
                "waveforms differ: {:?} vs {:?}",
                self.samples.dim(),
                other.samples.dim()
            )));
        }
        Ok(())
    }
}

/// Reads a PCM WAV file. Integer codes are divided by `2^(bits-1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::Unsupported | hound::Error::FormatError(_) => {
            Error::UnsupportedFormat(format!("{}: {e}", path.display()))
        }
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels (only mono or stereo)"
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} (accepted: 16/24/32-bit integer, 32-bit float)"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let samples = Array2::from_shape_vec((frames, channels), interleaved)
        .map_err(|e| Error::InvalidWaveform(e.to_string()))?
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    Waveform::new(samples, spec.sample_rate)
}

/// Loads a WAV under the canonical ingestion policy: 44.1 kHz (or resampled
/// when `allow_resample` is set) and duplicated to stereo when mono.
pub fn load_canonical(path: impl AsRef<Path>, allow_resample: bool) -> Result<Waveform> {
    let w = load_wav(path)?;
    let w = if w.sample_rate() != CANONICAL_RATE {
        if !allow_resample {
            return Err(Error::RateMismatch {
                expected: CANONICAL_RATE,
                found: w.sample_rate(),
            });
        }
        resample(&w, CANONICAL_RATE)?
    } else {
        w
    };
    Ok(w.to_stereo())
}

/// Writes 16-bit PCM. Samples are clipped to `[-1, 1 - 2^-15]` before quantization.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let spec = WavSpec {
        channels: w.channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for frame in w.samples().axis_iter(Axis(1)) {
        for &v in frame {
            writer.write_sample(quantize_16(v))?;
        }
    }
    writer.finalize()?;
    Ok(())
}

fn quantize_16(v: f64) -> i16 {
    let clipped = v.clamp(-1.0, MAX_16BIT);
    (clipped * 32768.0).round() as i16
}

/// Band-limited (Kaiser-windowed sinc) resampling. Output has
/// `round(frames * target / source)` frames.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate() as f64;
    let out_len = (w.frames() as f64 * ratio).round() as usize;
    let kernel = SincKernel::new(ratio.min(1.0));
    let mut out = Array2::zeros((w.channels(), out_len));
    for (src, mut dst) in w.samples().outer_iter().zip(out.outer_iter_mut()) {
        for (n, o) in dst.iter_mut().enumerate() {
            *o = kernel.interpolate(src, n as f64 / ratio);
        }
    }
    Waveform::new(out, target_rate)
}

struct SincKernel {
    cutoff: f64,
    half_width: f64,
    beta: f64,
    norm: f64,
}

impl SincKernel {
    const ZERO_CROSSINGS: f64 = 32.0;

    fn new(cutoff: f64) -> Self {
        // slightly below Nyquist of the lower rate so the transition band stays clear of aliasing
        let cutoff = cutoff * 0.97;
        let beta = 8.6;
        Self {
            cutoff,
            half_width: Self::ZERO_CROSSINGS / cutoff,
            beta,
            norm: bessel_i0(beta),
        }
    }

    fn tap(&self, x: f64) -> f64 {
        let r = x / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(self.beta * (1.0 - r * r).sqrt()) / self.norm;
        let arg = PI * self.cutoff * x;
        let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
        self.cutoff * sinc * window
    }

    fn interpolate(&self, src: ArrayView1<'_, f64>, t: f64) -> f64 {
        let lo = (t - self.half_width).ceil().max(0.0) as usize;
        let hi = ((t + self.half_width).floor() as usize).min(src.len().saturating_sub(1));
        (lo..=hi).map(|k| src[k] * self.tap(t - k as f64)).sum()
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Consecutive windows of `seg_frames` every `hop_frames`; a trailing
/// remainder shorter than a window is dropped.
pub fn segment(w: &Waveform, seg_frames: usize, hop_frames: usize) -> Result<Vec<Waveform>> {
    if seg_frames == 0 || hop_frames == 0 {
        return Err(Error::InvalidArgument(
            "segment and hop lengths must be positive".into(),
        ));
    }
    if w.frames() < seg_frames {
        return Ok(Vec::new());
    }
    let count = (w.frames() - seg_frames) / hop_frames + 1;
    Ok((0..count)
        .map(|i| w.slice_padded(i * hop_frames, seg_frames))
        .collect())
}

/// Deterministic vocal-like test signal: voiced syllables (harmonic series
/// with vibrato and two formant bumps) separated by short pauses, mono at
/// `rate`, peak 0.5.
pub fn synthetic_vocal(seed: u64, frames: usize, rate: u32) -> Waveform {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let fs = rate as f64;
    let mut out = vec![0.0; frames];
    let mut pos = (rng.gen_range(0.0..0.02) * fs) as usize;
    while pos < frames {
        let len = (rng.gen_range(0.12..0.35) * fs) as usize;
        let f0 = rng.gen_range(110.0..320.0);
        let glide = rng.gen_range(-0.08..0.08);
        let vib_rate = rng.gen_range(4.5..6.5);
        let formants = [rng.gen_range(400.0..900.0), rng.gen_range(1100.0..2600.0)];
        let amp = rng.gen_range(0.5..1.0);
        let n_harm = ((5000.0 / f0) as usize).max(1);
        let weights: Vec<f64> = (1..=n_harm)
            .map(|k| {
                let f = k as f64 * f0;
                let bump: f64 = formants.iter().map(|&c| (-((f - c) / 250.0).powi(2)).exp()).sum();
                (0.3 + 2.0 * bump) / k as f64
            })
            .collect();
        let mut phase = 0.0;
        for i in 0..len.min(frames - pos) {
            let t = i as f64 / fs;
            let frac = i as f64 / len as f64;
            let env = (frac / 0.1).min(1.0) * ((1.0 - frac) / 0.25).min(1.0);
            let f = f0 * (1.0 + glide * frac) * (1.0 + 0.015 * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f / fs;
            let v: f64 = weights.iter().enumerate().map(|(k, w)| w * ((k + 1) as f64 * phase).sin()).sum();
            out[pos + i] += amp * env * v;
        }
        pos += len + (rng.gen_range(0.03..0.15) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform::from_channels(&[out], rate).expect("finite synthetic signal")
}
