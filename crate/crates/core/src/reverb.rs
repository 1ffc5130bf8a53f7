//! Algorithmic reverb used to synthesise fully wet renders.
//!
//! A Householder feedback delay network with per-line absorption filters,
//! an optional allpass input diffuser, pre-delay and a handful of early
//! reflection taps. Output is 100 % wet: the dry path never reaches it.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};

pub const RT60_RANGE: (f64, f64) = (0.3, 6.0);
pub const PRE_DELAY_RANGE_MS: (f64, f64) = (0.0, 120.0);
pub const DAMPING_RANGE_HZ: (f64, f64) = (2000.0, 12000.0);
pub const DELAY_RANGE_MS: (f64, f64) = (20.0, 90.0);

const DIFFUSER_DELAYS: [usize; 4] = [142, 107, 379, 277];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyTap {
    pub delay_ms: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverbPreset {
    pub preset_id: String,
    pub rt60: f64,
    pub pre_delay_ms: f64,
    pub fdn_size: usize,
    /// Delay line lengths in samples at the canonical rate.
    pub delay_lengths: Vec<usize>,
    pub damping_cutoff: f64,
    pub diffusion: f64,
    pub stereo_width: f64,
    pub early_reflection_taps: Vec<EarlyTap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Parameter ranges a preset family is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSpace {
    pub split: Split,
    pub rt60: (f64, f64),
    pub pre_delay_ms: (f64, f64),
    pub fdn_sizes: Vec<usize>,
    pub damping_cutoff: (f64, f64),
    pub diffusion: (f64, f64),
    pub stereo_width: (f64, f64),
    pub early_taps: (usize, usize),
}

impl PresetSpace {
    pub fn train() -> Self {
        Self {
            split: Split::Train,
            rt60: (0.3, 4.5),
            pre_delay_ms: (0.0, 80.0),
            fdn_sizes: vec![16],
            damping_cutoff: (3000.0, 12000.0),
            diffusion: (0.3, 1.0),
            stereo_width: (0.3, 1.0),
            early_taps: (4, 10),
        }
    }

    /// Unseen reverb family: different network size, wider parameter ranges.
    pub fn validation() -> Self {
        Self {
            split: Split::Val,
            rt60: (0.5, 6.0),
            pre_delay_ms: (0.0, 120.0),
            fdn_sizes: vec![8],
            damping_cutoff: (2000.0, 10000.0),
            diffusion: (0.0, 0.9),
            stereo_width: (0.0, 1.0),
            early_taps: (2, 8),
        }
    }

    pub fn for_split(split: Split) -> Self {
        match split {
            Split::Train => Self::train(),
            Split::Val => Self::validation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |(lo, hi): (f64, f64), (min, max): (f64, f64)| lo <= hi && lo >= min && hi <= max;
        if !within(self.rt60, RT60_RANGE)
            || !within(self.pre_delay_ms, PRE_DELAY_RANGE_MS)
            || !within(self.damping_cutoff, DAMPING_RANGE_HZ)
            || !within(self.diffusion, (0.0, 1.0))
            || !within(self.stereo_width, (0.0, 1.0))
            || self.early_taps.0 > self.early_taps.1
            || self.fdn_sizes.is_empty()
            || self.fdn_sizes.iter().any(|n| *n != 8 && *n != 16)
        {
            return Err(Error::InvalidArgument(format!(
                "preset space {:?} out of range",
                self.split
            )));
        }
        Ok(())
    }

    /// True when the two spaces cannot produce the same preset: either the
    /// network sizes or the RT60 bands do not overlap.
    pub fn is_disjoint_from(&self, other: &PresetSpace) -> bool {
        let sizes_disjoint = self.fdn_sizes.iter().all(|n| !other.fdn_sizes.contains(n));
        let rt_disjoint = self.rt60.1 < other.rt60.0 || other.rt60.1 < self.rt60.0;
        sizes_disjoint || rt_disjoint
    }
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

/// Deterministic preset draw from `space`.
pub fn sample_preset(space: &PresetSpace, seed: u64) -> ReverbPreset {
    let salt = match space.split {
        Split::Train => 0x7261_696e,
        Split::Val => 0x7661_6c00,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    };
    let rt60 = uniform(&mut rng, space.rt60);
    let pre_delay_ms = uniform(&mut rng, space.pre_delay_ms);
    let fdn_size = space.fdn_sizes[rng.gen_range(0..space.fdn_sizes.len())];
    let damping_cutoff = uniform(&mut rng, space.damping_cutoff);
    let diffusion = uniform(&mut rng, space.diffusion);
    let stereo_width = uniform(&mut rng, space.stereo_width);
    let delay_lengths = draw_delay_lengths(&mut rng, fdn_size);
    let n_taps = rng.gen_range(space.early_taps.0..=space.early_taps.1);
    let mut taps: Vec<EarlyTap> = (0..n_taps)
        .map(|_| {
            let delay_ms = rng.gen_range(1.0..80.0);
            let gain = rng.gen_range(0.1..0.6) * (-delay_ms / 60.0f64).exp();
            EarlyTap { delay_ms, gain }
        })
        .collect();
    taps.sort_by(|a, b| a.delay_ms.total_cmp(&b.delay_ms));
    ReverbPreset {
        preset_id: format!("{}-{seed:04}", split_tag(space.split)),
        rt60,
        pre_delay_ms,
        fdn_size,
        delay_lengths,
        damping_cutoff,
        diffusion,
        stereo_width,
        early_reflection_taps: taps,
    }
}

/// `count` presets with seeds `0..count`, the frozen set for a split.
pub fn preset_bank(space: &PresetSpace, count: usize) -> Vec<ReverbPreset> {
    (0..count as u64).map(|s| sample_preset(space, s)).collect()
}

fn draw_delay_lengths(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let fs = CANONICAL_RATE as f64;
    let lo = (DELAY_RANGE_MS.0 * 1e-3 * fs).ceil() as usize;
    let hi = (DELAY_RANGE_MS.1 * 1e-3 * fs).floor() as usize;
    let primes = primes_in(lo, hi);
    let mut used = BTreeSet::new();
    let ratio = DELAY_RANGE_MS.1 / DELAY_RANGE_MS.0;
    for i in 0..n {
        // log-spaced targets with jitter; distinct primes are pairwise coprime
        let pos = (i as f64 + rng.gen_range(0.1..0.9)) / n as f64;
        let target = lo as f64 * ratio.powf(pos);
        let idx = primes.partition_point(|&p| (p as f64) < target);
        let mut pick = None;
        for off in 0..primes.len() {
            for cand in [idx.checked_sub(off), Some(idx + off)].into_iter().flatten() {
                if let Some(&p) = primes.get(cand) {
                    if !used.contains(&p) {
                        pick = Some(p);
                        break;
                    }
                }
            }
            if pick.is_some() {
                break;
            }
        }
        used.insert(pick.expect("enough primes in delay range"));
    }
    used.into_iter().collect()
}

fn primes_in(lo: usize, hi: usize) -> Vec<usize> {
    let mut sieve = vec![true; hi + 1];
    sieve[0] = false;
    if hi >= 1 {
        sieve[1] = false;
    }
    let mut i = 2;
    while i * i <= hi {
        if sieve[i] {
            (i * i..=hi).step_by(i).for_each(|j| sieve[j] = false);
        }
        i += 1;
    }
    (lo..=hi).filter(|&p| sieve[p]).collect()
}

impl ReverbPreset {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("preset {}: {what}", self.preset_id)));
        if !(RT60_RANGE.0..=RT60_RANGE.1).contains(&self.rt60) {
            return bad("rt60 out of range");
        }
        if !(PRE_DELAY_RANGE_MS.0..=PRE_DELAY_RANGE_MS.1).contains(&self.pre_delay_ms) {
            return bad("pre-delay out of range");
        }
        if !(DAMPING_RANGE_HZ.0..=DAMPING_RANGE_HZ.1).contains(&self.damping_cutoff) {
            return bad("damping cutoff out of range");
        }
        if !(0.0..=1.0).contains(&self.diffusion) || !(0.0..=1.0).contains(&self.stereo_width) {
            return bad("diffusion/width out of range");
        }
        if !matches!(self.fdn_size, 8 | 16) || self.delay_lengths.len() != self.fdn_size {
            return bad("fdn size must be 8 or 16 with one delay per line");
        }
        let fs = CANONICAL_RATE as f64;
        let mut seen = BTreeSet::new();
        for &d in &self.delay_lengths {
            let ms = d as f64 * 1e3 / fs;
            if !(DELAY_RANGE_MS.0..=DELAY_RANGE_MS.1).contains(&ms) || !seen.insert(d) {
                return bad("delay lengths must be distinct and within 20-90 ms");
            }
        }
        if self
            .early_reflection_taps
            .iter()
            .any(|t| t.delay_ms < 1.0 || !t.gain.is_finite())
        {
            return bad("early taps must be at least 1 ms after the pre-delay");
        }
        Ok(())
    }

    pub fn pre_delay_samples(&self) -> usize {
        (self.pre_delay_ms * 1e-3 * CANONICAL_RATE as f64).round() as usize
    }

    /// Per-line broadband loop gain giving the preset's RT60.
    pub fn line_gains(&self) -> Vec<f64> {
        let fs = CANONICAL_RATE as f64;
        self.delay_lengths
            .iter()
            .map(|&d| 10f64.powf(-3.0 * d as f64 / (fs * self.rt60)))
            .collect()
    }

    /// Dense `N x N` Householder feedback matrix `I - 2/N * 11^T`.
    pub fn feedback_matrix(&self) -> Array2<f64> {
        let n = self.fdn_size;
        Array2::from_shape_fn((n, n), |(i, j)| {
            let h = -2.0 / n as f64;
            if i == j {
                1.0 + h
            } else {
                h
            }
        })
    }

    /// Ratio of high-frequency to broadband decay time.
    fn hf_decay_ratio(&self) -> f64 {
        let span = DAMPING_RANGE_HZ.1 - DAMPING_RANGE_HZ.0;
        0.6 + 0.4 * ((self.damping_cutoff - DAMPING_RANGE_HZ.0) / span).clamp(0.0, 1.0)
    }
}

struct DelayLine {
    buf: Vec<f64>,
    pos: usize,
}

impl DelayLine {
    fn new(len: usize) -> Self {
        Self {
            buf: vec![0.0; len.max(1)],
            pos: 0,
        }
    }

    fn read(&self) -> f64 {
        self.buf[self.pos]
    }

    fn write_advance(&mut self, v: f64) {
        self.buf[self.pos] = v;
        self.pos = (self.pos + 1) % self.buf.len();
    }
}

struct Allpass {
    line: DelayLine,
    gain: f64,
}

impl Allpass {
    fn process(&mut self, x: f64) -> f64 {
        let delayed = self.line.read();
        let v = x + self.gain * delayed;
        self.line.write_advance(v);
        delayed - self.gain * v
    }
}

#[derive(Clone, Copy, Default)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Biquad {
    fn lowpass(cutoff: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * (cutoff / fs).min(0.49);
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b0: (1.0 - cos) / 2.0 / a0,
            b1: (1.0 - cos) / a0,
            b2: (1.0 - cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
            z1: 0.0,
            z2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.z1;
        self.z1 = self.b1 * x - self.a1 * y + self.z2;
        self.z2 = self.b2 * x - self.a2 * y;
        y
    }
}

/// Running state of one preset; feed samples in order.
struct Fdn {
    lines: Vec<DelayLine>,
    gains: Vec<f64>,
    // one-pole absorption: y = g (1 - p) x + p y
    poles: Vec<f64>,
    lp_state: Vec<f64>,
    in_signs: Vec<f64>,
    out_left: Vec<f64>,
    out_right: Vec<f64>,
    diffuser: Vec<Allpass>,
    pre_delay: Option<DelayLine>,
    early: DelayLine,
    taps: Vec<(usize, f64, f64)>,
    width: f64,
    tone: [Biquad; 2],
    level: f64,
    scratch: Vec<f64>,
}

impl Fdn {
    fn new(p: &ReverbPreset) -> Self {
        let n = p.fdn_size;
        let fs = CANONICAL_RATE as f64;
        let gains = p.line_gains();
        let alpha = 1.0 / p.hf_decay_ratio();
        let poles = gains
            .iter()
            .map(|&g| {
                // Nyquist gain g^alpha, DC gain g
                let r = g.powf(alpha - 1.0);
                (1.0 - r) / (1.0 + r)
            })
            .collect();
        let norm = 1.0 / (n as f64).sqrt();
        let in_signs = (0..n).map(|i| if i % 3 == 1 { -norm } else { norm }).collect();
        let out_left = (0..n).map(|i| if i % 2 == 0 { norm } else { -norm }).collect();
        let out_right = (0..n).map(|i| if (i / 2) % 2 == 0 { norm } else { -norm }).collect();
        let diffuser = if p.diffusion > 0.0 {
            DIFFUSER_DELAYS
                .iter()
                .map(|&d| Allpass {
                    line: DelayLine::new(d),
                    gain: 0.7 * p.diffusion,
                })
                .collect()
        } else {
            Vec::new()
        };
        let max_tap = p
            .early_reflection_taps
            .iter()
            .map(|t| (t.delay_ms * 1e-3 * fs).round() as usize)
            .max()
            .unwrap_or(0);
        let taps = p
            .early_reflection_taps
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let d = (t.delay_ms * 1e-3 * fs).round() as usize;
                let pan: f64 = if i % 2 == 0 { 0.3 } else { 0.7 };
                (d, t.gain * (1.0 - pan).sqrt(), t.gain * pan.sqrt())
            })
            .collect();
        Self {
            lines: p.delay_lengths.iter().map(|&d| DelayLine::new(d)).collect(),
            gains,
            poles,
            lp_state: vec![0.0; n],
            in_signs,
            out_left,
            out_right,
            diffuser,
            pre_delay: (p.pre_delay_samples() > 0).then(|| DelayLine::new(p.pre_delay_samples())),
            early: DelayLine::new(max_tap + 1),
            taps,
            width: p.stereo_width,
            tone: [Biquad::lowpass(p.damping_cutoff, fs); 2],
            level: 1.0,
            scratch: vec![0.0; n],
        }
    }

    fn tick(&mut self, x: f64) -> (f64, f64) {
        let x = match &mut self.pre_delay {
            Some(line) => {
                let d = line.read();
                line.write_advance(x);
                d
            }
            None => x,
        };

        // early reflections: tap a short history of the pre-delayed input
        self.early.write_advance(x);
        let hist = &self.early;
        let len = hist.buf.len();
        let mut er_l = 0.0;
        let mut er_r = 0.0;
        for &(d, gl, gr) in &self.taps {
            // the newest sample sits just behind the write position
            let idx = (hist.pos + len - 1 - d) % len;
            er_l += gl * hist.buf[idx];
            er_r += gr * hist.buf[idx];
        }

        let mut diffused = x;
        for ap in &mut self.diffuser {
            diffused = ap.process(diffused);
        }

        let n = self.lines.len();
        let mut late_l = 0.0;
        let mut late_r = 0.0;
        let mut sum = 0.0;
        for i in 0..n {
            let s = self.lines[i].read();
            self.scratch[i] = s;
            late_l += self.out_left[i] * s;
            late_r += self.out_right[i] * s;
            sum += s;
        }
        let h = 2.0 / n as f64 * sum;
        for i in 0..n {
            let fb = self.scratch[i] - h;
            let p = self.poles[i];
            self.lp_state[i] = self.gains[i] * (1.0 - p) * fb + p * self.lp_state[i];
            let v = self.lp_state[i] + self.in_signs[i] * diffused;
            self.lines[i].write_advance(v);
        }

        let l = late_l + er_l;
        let r = late_r + er_r;
        let mid = 0.5 * (l + r);
        let side = 0.5 * (l - r) * self.width;
        let l = self.tone[0].process(mid + side);
        let r = self.tone[1].process(mid - side);
        (self.level * l, self.level * r)
    }
}

/// Renders a mono excitation through the preset, `[2, len]` output.
fn run(p: &ReverbPreset, input: impl Iterator<Item = f64>, len: usize, level: f64) -> Array2<f64> {
    let mut fdn = Fdn::new(p);
    fdn.level = level;
    let mut out = Array2::zeros((2, len));
    for (n, x) in input.chain(std::iter::repeat(0.0)).take(len).enumerate() {
        let (l, r) = fdn.tick(x);
        out[[0, n]] = l;
        out[[1, n]] = r;
    }
    out
}

/// Gain that gives the preset's impulse response unit energy per channel.
fn output_level(p: &ReverbPreset) -> f64 {
    let len = (p.rt60 * CANONICAL_RATE as f64).ceil() as usize + p.pre_delay_samples();
    let raw = run(p, std::iter::once(1.0), len, 1.0);
    let energy = raw.iter().map(|v| v * v).sum::<f64>() / 2.0;
    if energy > 0.0 {
        1.0 / energy.sqrt()
    } else {
        1.0
    }
}

/// Stereo impulse response of the preset (excluding any direct path).
pub fn impulse_response(p: &ReverbPreset, length: usize) -> Result<Waveform> {
    p.validate()?;
    let min = (p.rt60 * CANONICAL_RATE as f64).ceil() as usize;
    if length < min {
        return Err(Error::TooShort(format!(
            "impulse response length {length} is below rt60 * rate = {min}"
        )));
    }
    let level = output_level(p);
    Waveform::new(run(p, std::iter::once(1.0), length, level), CANONICAL_RATE)
}

/// 100 % wet render of `dry` (mid downmix excites the network). The output
/// is stereo and truncated to the dry length.
pub fn render_wet(dry: &Waveform, p: &ReverbPreset) -> Result<Waveform> {
    if dry.sample_rate() != CANONICAL_RATE {
        return Err(Error::RateMismatch {
            expected: CANONICAL_RATE,
            found: dry.sample_rate(),
        });
    }
    p.validate()?;
    let level = output_level(p);
    let mono = dry.to_mono();
    let input = mono.channel(0).to_vec();
    Waveform::new(run(p, input.into_iter(), dry.frames(), level), CANONICAL_RATE)
}

/// Schroeder backward integration of the summed channel energy, in dB
/// relative to the total.
pub fn schroeder_curve(ir: &Waveform) -> Vec<f64> {
    let energy: Vec<f64> = (0..ir.frames())
        .map(|n| ir.samples().column(n).iter().map(|v| v * v).sum())
        .collect();
    let mut acc = 0.0;
    let mut edc = vec![0.0; energy.len()];
    for (i, e) in energy.iter().enumerate().rev() {
        acc += e;
        edc[i] = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    edc.iter()
        .map(|v| 10.0 * (v / total).max(1e-30).log10())
        .collect()
}

/// RT60 from a least-squares line through the -5..-35 dB span of the
/// Schroeder curve, extrapolated to -60 dB.
pub fn estimate_rt60(ir: &Waveform) -> Result<f64> {
    let curve = schroeder_curve(ir);
    let fs = ir.sample_rate() as f64;
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, &db)| (-35.0..=-5.0).contains(&db))
        .map(|(i, &db)| (i as f64 / fs, db))
        .collect();
    if pts.len() < 2 {
        return Err(Error::TooShort("decay does not span -5..-35 dB".into()));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        (a + (x - mx) * (y - my), b + (x - mx) * (x - mx))
    });
    let slope = num / den;
    if slope >= 0.0 {
        return Err(Error::InvalidArgument("non-decaying impulse response".into()));
    }
    Ok(-60.0 / slope)
}
