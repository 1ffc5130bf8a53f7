//! Objective quality metrics and evaluation reports.
//!
//! - SI-SDR: per channel, averaged, clamped to +/-100 dB.
//! - STOI: Taal et al. short-time objective intelligibility on the mid
//!   downmix, at 10 kHz with 15 third-octave bands and 384 ms segments.
//! - SRMR: speech-to-reverberation modulation energy ratio on the mid
//!   downmix: gammatone envelopes, 8 modulation bands from 4 to 128 Hz,
//!   energy in the lower four bands over the upper four.
//! - PESQ is delegated to an external command, if configured.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, save_wav, Waveform};
use crate::{Error, Result};

pub const SI_SDR_CLAMP_DB: f64 = 100.0;

/// Per-metric values for one clip or condition.
pub type Scores = BTreeMap<MetricName, Option<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    SiSdr,
    Stoi,
    Srmr,
    Pesq,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::SiSdr => "si_sdr",
            MetricName::Stoi => "stoi",
            MetricName::Srmr => "srmr",
            MetricName::Pesq => "pesq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: MetricName,
    /// dB for SI-SDR, a fraction for STOI, a ratio for SRMR; `None` when
    /// the metric is unavailable (no PESQ scorer configured).
    pub value: Option<f64>,
    pub clip_id: String,
}

fn check_pair(est: &Waveform, reference: &Waveform) -> Result<()> {
    if est.frames() != reference.frames() || est.channels() != reference.channels() {
        return Err(Error::Shape(format!(
            "estimate is {}x{}, reference is {}x{}",
            est.channels(),
            est.frames(),
            reference.channels(),
            reference.frames()
        )));
    }
    Ok(())
}

fn si_sdr_channel(est: ArrayView1<'_, f64>, reference: ArrayView1<'_, f64>) -> Result<f64> {
    let ref_energy = reference.dot(&reference);
    if ref_energy <= 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let alpha = est.dot(&reference) / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual: f64 = est.iter().zip(reference.iter()).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    let db = 10.0 * (target_energy / residual).log10();
    Ok(if db.is_nan() { -SI_SDR_CLAMP_DB } else { db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB) })
}

/// Scale-invariant SDR in dB, averaged over channels.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let mut total = 0.0;
    for ch in 0..est.channels() {
        total += si_sdr_channel(est.channel(ch), reference.channel(ch))?;
    }
    Ok(total / est.channels() as f64)
}

fn mid(w: &Waveform) -> Vec<f64> {
    w.to_mono().channel(0).to_vec()
}

fn hann(n: usize) -> Vec<f64> {
    // symmetric window over n + 2 points without the zero end points
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos()).collect()
}

pub mod stoi_params {
    pub const FS: u32 = 10_000;
    pub const FRAME: usize = 256;
    pub const HOP: usize = 128;
    pub const NFFT: usize = 512;
    pub const BANDS: usize = 15;
    pub const MIN_FREQ: f64 = 150.0;
    /// Frames per intermediate-intelligibility segment (384 ms).
    pub const SEGMENT: usize = 30;
    /// Lower signal-to-distortion bound in dB.
    pub const BETA_DB: f64 = -15.0;
    pub const DYN_RANGE_DB: f64 = 40.0;
}

/// Drops frames more than 40 dB below the loudest reference frame and
/// overlap-adds the rest back together, for both signals.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    use stoi_params::*;
    let w = hann(FRAME);
    let starts: Vec<usize> = (0..).map(|k| k * HOP).take_while(|s| s + FRAME <= x.len()).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| e > max - DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    if keep.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (keep.len() - 1) * HOP + FRAME;
    let mut xo = vec![0.0; len];
    let mut yo = vec![0.0; len];
    for (k, &s) in keep.iter().enumerate() {
        for i in 0..FRAME {
            xo[k * HOP + i] += w[i] * x[s + i];
            yo[k * HOP + i] += w[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// Third-octave band magnitudes, `[bands, frames]`.
fn third_octave_spectrogram(x: &[f64], planner: &mut FftPlanner<f64>) -> Array2<f64> {
    use stoi_params::*;
    let w = hann(FRAME);
    let fft = planner.plan_fft_forward(NFFT);
    let frames: Vec<usize> = (0..).map(|k| k * HOP).take_while(|s| s + FRAME <= x.len()).collect();
    let bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |f: f64| {
        (0..bins)
            .min_by(|&a, &b| (freqs[a] - f).abs().partial_cmp(&(freqs[b] - f).abs()).unwrap())
            .unwrap()
    };
    let edges: Vec<(usize, usize)> = (0..BANDS)
        .map(|b| {
            let cf = MIN_FREQ * 2f64.powf(b as f64 / 3.0);
            (nearest(cf * 2f64.powf(-1.0 / 6.0)), nearest(cf * 2f64.powf(1.0 / 6.0)))
        })
        .collect();
    let mut out = Array2::zeros((BANDS, frames.len()));
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for (m, &s) in frames.iter().enumerate() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if i < FRAME { w[i] * x[s + i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in edges.iter().enumerate() {
            let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[[b, m]] = e.sqrt();
        }
    }
    out
}

fn centered_norm(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, n)
}

/// Short-time objective intelligibility of `est` against `reference`.
pub fn stoi(est: &Waveform, reference: &Waveform) -> Result<f64> {
    use stoi_params::*;
    check_pair(est, reference)?;
    let to10k = |w: &Waveform| -> Result<Vec<f64>> {
        let m = Waveform::from_channels(&[mid(w)], w.sample_rate())?;
        Ok(if w.sample_rate() == FS { m.channel(0).to_vec() } else { resample(&m, FS)?.channel(0).to_vec() })
    };
    let x = to10k(reference)?;
    let y = to10k(est)?;
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let (x, y) = remove_silent_frames(&x, &y);
    let mut planner = FftPlanner::new();
    let xs = third_octave_spectrogram(&x, &mut planner);
    let ys = third_octave_spectrogram(&y, &mut planner);
    let frames = xs.ncols();
    if frames < SEGMENT {
        return Err(Error::TooShort(format!(
            "STOI needs {SEGMENT} active frames (about 384 ms), found {frames}"
        )));
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0;
    for m in SEGMENT..=frames {
        for b in 0..BANDS {
            let xseg: Vec<f64> = (m - SEGMENT..m).map(|t| xs[[b, t]]).collect();
            let yseg: Vec<f64> = (m - SEGMENT..m).map(|t| ys[[b, t]]).collect();
            let xn = xseg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn = yseg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = xn / (yn + f64::EPSILON);
            let yprime: Vec<f64> = xseg.iter().zip(&yseg).map(|(&xv, &yv)| (alpha * yv).min(clip * xv)).collect();
            let (xc, xcn) = centered_norm(&xseg);
            let (yc, ycn) = centered_norm(&yprime);
            let dot: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
            total += dot / (xcn * ycn + f64::EPSILON);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub mod srmr_params {
    pub const FS: u32 = 16_000;
    pub const ACOUSTIC_BANDS: usize = 23;
    pub const MIN_CF: f64 = 125.0;
    pub const MAX_CF: f64 = 7_000.0;
    pub const MOD_BANDS: usize = 8;
    pub const MOD_MIN: f64 = 4.0;
    pub const MOD_MAX: f64 = 128.0;
    pub const MOD_Q: f64 = 2.0;
    /// Envelope decimation factor (envelopes run at 2 kHz).
    pub const DECIMATE: usize = 8;
    pub const FRAME_SECS: f64 = 0.256;
    pub const HOP_SECS: f64 = 0.064;
}

fn erb(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// Centre frequencies equally spaced on the ERB-rate scale.
fn erb_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let rate = |f: f64| 21.4 * (4.37 * f / 1000.0 + 1.0).log10();
    let inv = |e: f64| (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37;
    let (a, b) = (rate(lo), rate(hi));
    (0..n).map(|i| inv(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

/// Hilbert-like envelope of a 4th-order gammatone channel: demodulate to
/// baseband and apply four cascaded complex one-pole low-passes.
fn gammatone_envelope(x: &[f64], cf: f64, fs: f64) -> Vec<f64> {
    let b = 2.0 * PI * 1.019 * erb(cf) / fs;
    let a = (-b).exp();
    let mut stages = [Complex::new(0.0, 0.0); 4];
    let step = Complex::from_polar(1.0, -2.0 * PI * cf / fs);
    let mut rot = Complex::new(1.0, 0.0);
    // unit DC gain of the cascade
    let gain = (1.0 - a).powi(4);
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        let mut s = rot * v;
        for st in stages.iter_mut() {
            *st = *st * a + s;
            s = *st;
        }
        out.push(2.0 * gain * s.norm());
        rot *= step;
        if out.len() % 4096 == 0 {
            rot /= rot.norm();
        }
    }
    out
}

/// Constant-peak-gain biquad band-pass, applied forward.
fn bandpass(x: &[f64], fc: f64, q: f64, fs: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * fc / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// Per-band modulation energies `[acoustic_band, mod_band]`, averaged over
/// 256 ms frames.
pub fn modulation_energy(x: &Waveform) -> Result<Array2<f64>> {
    use srmr_params::*;
    let m = Waveform::from_channels(&[mid(x)], x.sample_rate())?;
    let m = if x.sample_rate() == FS { m } else { resample(&m, FS)? };
    let sig = m.channel(0).to_vec();
    if sig.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let env_fs = FS as f64 / DECIMATE as f64;
    let frame = (FRAME_SECS * env_fs).round() as usize;
    let hop = (HOP_SECS * env_fs).round() as usize;
    let n_env = sig.len() / DECIMATE;
    if n_env < frame {
        return Err(Error::TooShort(format!("SRMR needs at least {FRAME_SECS} s of audio")));
    }
    let win: Vec<f64> = (0..frame)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (frame - 1) as f64).cos())
        .collect();
    let mod_cf: Vec<f64> = (0..MOD_BANDS)
        .map(|k| MOD_MIN * (MOD_MAX / MOD_MIN).powf(k as f64 / (MOD_BANDS - 1) as f64))
        .collect();
    let mut energy = Array2::zeros((ACOUSTIC_BANDS, MOD_BANDS));
    for (j, cf) in erb_space(MIN_CF, MAX_CF, ACOUSTIC_BANDS).into_iter().enumerate() {
        let env = gammatone_envelope(&sig, cf, FS as f64);
        // box-average decimation keeps the 4..128 Hz range intact
        let env: Vec<f64> = env.chunks_exact(DECIMATE).map(|c| c.iter().sum::<f64>() / DECIMATE as f64).collect();
        for (k, &fc) in mod_cf.iter().enumerate() {
            let y = bandpass(&env, fc, MOD_Q, env_fs);
            let mut acc = 0.0;
            let mut frames = 0;
            let mut s = 0;
            while s + frame <= y.len() {
                acc += (0..frame).map(|i| (win[i] * y[s + i]).powi(2)).sum::<f64>();
                frames += 1;
                s += hop;
            }
            energy[[j, k]] = acc / frames as f64;
        }
    }
    Ok(energy)
}

/// Ratio of modulation energy in the four lowest bands to the four highest.
pub fn srmr(x: &Waveform) -> Result<f64> {
    let e = modulation_energy(x)?;
    let low: f64 = e.columns().into_iter().take(4).map(|c| c.sum()).sum();
    let high: f64 = e.columns().into_iter().skip(4).map(|c| c.sum()).sum();
    if high <= 0.0 {
        return Err(Error::ZeroEnergy);
    }
    Ok(low / high)
}

/// External PESQ scorer: `program [args..] ref.wav deg.wav` must print a
/// single number. Both files are written as 16 kHz mono.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PesqCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

pub const PESQ_RATE: u32 = 16_000;

impl PesqCommand {
    /// Splits a whitespace-separated command line.
    pub fn parse(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty PESQ command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    pub fn score(&self, est: &Waveform, reference: &Waveform) -> Result<f64> {
        check_pair(est, reference)?;
        let dir = tempfile::tempdir()?;
        let prep = |w: &Waveform, name: &str| -> Result<std::path::PathBuf> {
            let m = w.to_mono();
            let m = if m.sample_rate() == PESQ_RATE { m } else { resample(&m, PESQ_RATE)? };
            let path = dir.path().join(name);
            save_wav(&m, &path)?;
            Ok(path)
        };
        let r = prep(reference, "ref.wav")?;
        let d = prep(est, "deg.wav")?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&r)
            .arg(&d)
            .output()
            .map_err(|e| Error::External(format!("{}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::External(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.split_whitespace()
            .find_map(|t| t.parse::<f64>().ok())
            .ok_or_else(|| Error::External(format!("no number in scorer output: {}", text.trim())))
    }
}

/// Conversion scores against the reverberated target (not the dry source).
pub fn eval_conversion(output: &Waveform, target: &Waveform, clip_id: &str, pesq: Option<&PesqCommand>) -> Result<Vec<MetricResult>> {
    check_pair(output, target)?;
    let mut out = vec![MetricResult {
        name: MetricName::Stoi,
        value: Some(stoi(output, target)?),
        clip_id: clip_id.to_string(),
    }];
    out.push(MetricResult {
        name: MetricName::Pesq,
        value: pesq.map(|p| p.score(output, target)).transpose()?,
        clip_id: clip_id.to_string(),
    });
    Ok(out)
}

/// One clip of a de-reverberation sweep.
#[derive(Debug, Clone)]
pub struct DerevItem {
    pub clip_id: String,
    pub gamma: f64,
    pub input: Waveform,
    pub output: Waveform,
    pub dry: Waveform,
}

fn derev_scores(est: &Waveform, dry: &Waveform, pesq: Option<&PesqCommand>) -> Result<Scores> {
    let mut m = BTreeMap::new();
    m.insert(MetricName::SiSdr, Some(si_sdr(est, dry)?));
    m.insert(MetricName::Stoi, Some(stoi(est, dry)?));
    m.insert(MetricName::Srmr, Some(srmr(est)?));
    m.insert(MetricName::Pesq, pesq.map(|p| p.score(est, dry)).transpose()?);
    Ok(m)
}

/// Per-gamma mean scores of the input and output series against the dry
/// source.
pub fn eval_dereverb(items: &[DerevItem], pesq: Option<&PesqCommand>) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<(i64, &str), Vec<Scores>> = BTreeMap::new();
    for it in items {
        let key = (it.gamma * 1000.0).round() as i64;
        groups.entry((key, "input")).or_default().push(derev_scores(&it.input, &it.dry, pesq)?);
        groups.entry((key, "output")).or_default().push(derev_scores(&it.output, &it.dry, pesq)?);
    }
    Ok(groups
        .into_iter()
        .map(|((g, cond), scores)| ReportRow::aggregate(cond, Some(g as f64 / 1000.0), &scores))
        .collect())
}

/// One line of an evaluation report: mean scores for a condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub gamma: Option<f64>,
    pub count: usize,
    pub metrics: Scores,
}

impl ReportRow {
    /// Means over clips; a metric missing for any clip is reported missing.
    pub fn aggregate(condition: &str, gamma: Option<f64>, scores: &[Scores]) -> Self {
        let mut metrics = BTreeMap::new();
        let names: std::collections::BTreeSet<MetricName> = scores.iter().flat_map(|s| s.keys().copied()).collect();
        for name in names {
            let vals: Option<Vec<f64>> = scores.iter().map(|s| s.get(&name).copied().flatten()).collect();
            let mean = vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
            metrics.insert(name, mean);
        }
        Self {
            condition: condition.to_string(),
            gamma,
            count: scores.len(),
            metrics,
        }
    }
}

pub fn results_to_map(results: &[MetricResult]) -> Scores {
    results.iter().map(|r| (r.name, r.value)).collect()
}

/// Fixed-width text table; STOI is shown as a percentage.
pub fn format_table(rows: &[ReportRow]) -> String {
    let names: std::collections::BTreeSet<MetricName> = rows.iter().flat_map(|r| r.metrics.keys().copied()).collect();
    let mut s = format!("{:<12}{:>8}{:>7}", "condition", "gamma", "n");
    for n in &names {
        let _ = write!(s, "{:>12}", n.as_str());
    }
    s.push('\n');
    for r in rows {
        let g = r.gamma.map_or("-".to_string(), |g| format!("{g:.2}"));
        let _ = write!(s, "{:<12}{:>8}{:>7}", r.condition, g, r.count);
        for n in &names {
            let cell = match r.metrics.get(n).copied().flatten() {
                None => "n/a".to_string(),
                Some(v) if *n == MetricName::Stoi => format!("{:.2}", 100.0 * v),
                Some(v) => format!("{v:.3}"),
            };
            let _ = write!(s, "{cell:>12}");
        }
        s.push('\n');
    }
    s
}

/// Writes `<stem>.txt` (table) and `<stem>.jsonl` (one row per line).
pub fn write_report(rows: &[ReportRow], stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(stem.with_extension("txt"), format_table(rows))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("jsonl"))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synthetic_vocal;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::from_channels(&[v], 16_000).unwrap()
    }

    #[test]
    fn si_sdr_identity_scale_and_orthogonal_noise() {
        let s = noise(1, 4000);
        let w = wave(s.clone());
        assert_eq!(si_sdr(&w, &w).unwrap(), SI_SDR_CLAMP_DB);
        assert_eq!(si_sdr(&w.scaled(2.0), &w).unwrap(), SI_SDR_CLAMP_DB);
        // n orthogonal to s with equal norm: Gram-Schmidt on a second noise vector
        let r = noise(2, 4000);
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let proj: f64 = r.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
        let mut n: Vec<f64> = r.iter().zip(&s).map(|(a, b)| a - proj * b).collect();
        let nn: f64 = n.iter().map(|v| v * v).sum();
        n.iter_mut().for_each(|v| *v *= (ss / nn).sqrt());
        let est = wave(s.iter().zip(&n).map(|(a, b)| a + b).collect());
        assert_abs_diff_eq!(si_sdr(&est, &w).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn si_sdr_errors() {
        let w = wave(noise(1, 100));
        assert!(matches!(si_sdr(&w, &wave(vec![0.0; 100])), Err(Error::ZeroEnergy)));
        assert!(matches!(si_sdr(&w, &wave(noise(1, 99))), Err(Error::Shape(_))));
    }

    #[test]
    fn stoi_identity_gain_and_noise_order() {
        let x = synthetic_vocal(3, 44_100 * 2, 44_100);
        assert_abs_diff_eq!(stoi(&x, &x).unwrap(), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(stoi(&x.scaled(0.5), &x).unwrap(), 1.0, epsilon = 1e-6);
        let n = noise(4, x.frames());
        let px = x.energy() / x.frames() as f64;
        let pn = n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64;
        let scores: Vec<f64> = [20.0, 10.0, 0.0]
            .iter()
            .map(|snr: &f64| {
                let g = (px / pn / 10f64.powf(snr / 10.0)).sqrt();
                let y: Vec<f64> = x.channel(0).iter().zip(&n).map(|(a, b)| a + g * b).collect();
                stoi(&Waveform::from_channels(&[y], 44_100).unwrap(), &x).unwrap()
            })
            .collect();
        assert!(scores[0] < 1.0 && scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn stoi_rejects_short_and_silent() {
        let x = synthetic_vocal(3, 2000, 44_100);
        assert!(matches!(stoi(&x, &x), Err(Error::TooShort(_))));
        let z = Waveform::silence(1, 44_100, 44_100);
        assert!(matches!(stoi(&z, &z), Err(Error::ZeroEnergy)));
    }

    #[test]
    fn srmr_gain_and_channel_swap_invariance() {
        let x = synthetic_vocal(5, 44_100, 44_100);
        let a = srmr(&x).unwrap();
        assert!(a > 0.0);
        assert_abs_diff_eq!(srmr(&x.scaled(2.0)).unwrap(), a, epsilon = 1e-6 * a);
        let l = synthetic_vocal(6, 44_100, 44_100);
        let st = Waveform::from_channels(&[x.channel(0).to_vec(), l.channel(0).to_vec()], 44_100).unwrap();
        let sw = Waveform::from_channels(&[l.channel(0).to_vec(), x.channel(0).to_vec()], 44_100).unwrap();
        assert_abs_diff_eq!(srmr(&st).unwrap(), srmr(&sw).unwrap(), epsilon = 1e-9);
        assert!(matches!(srmr(&Waveform::silence(1, 44_100, 44_100)), Err(Error::ZeroEnergy)));
    }

    #[test]
    fn report_table_and_aggregation() {
        let mut a = BTreeMap::new();
        a.insert(MetricName::Stoi, Some(0.8));
        a.insert(MetricName::Pesq, None);
        let mut b = a.clone();
        b.insert(MetricName::Stoi, Some(0.6));
        let row = ReportRow::aggregate("input", None, &[a, b]);
        assert_abs_diff_eq!(row.metrics[&MetricName::Stoi].unwrap(), 0.7, epsilon = 1e-12);
        assert_eq!(row.metrics[&MetricName::Pesq], None);
        let t = format_table(&[row]);
        assert!(t.contains("70.00") && t.contains("n/a"));
    }

    #[test]
    fn pesq_hook_parses_scorer_output() {
        let x = synthetic_vocal(1, 22_050, 44_100);
        let cmd = PesqCommand::parse("echo 3.25").unwrap();
        assert_eq!(cmd.score(&x, &x).unwrap(), 3.25);
        let bad = PesqCommand::parse("false").unwrap();
        assert!(matches!(bad.score(&x, &x), Err(Error::External(_))));
    }
}
