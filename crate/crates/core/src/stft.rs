//! Hamming-window STFT analysis and weighted overlap-add synthesis.
//!
//! Magnitude spectrograms keep the full half-spectrum (`fft_size / 2 + 1`
//! bins). The network sees only the lower `fft_size / 2` bins; see
//! [`MagnitudeSpectrogram::network_bins`] and
//! [`MagnitudeSpectrogram::from_network_bins`].

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::with_window(2048)
    }
}

impl StftConfig {
    /// 75 % overlap Hamming analysis with an FFT as long as the window.
    pub fn with_window(win_len: usize) -> Self {
        Self {
            win_len,
            hop: win_len / 4,
            fft_size: win_len,
            center: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len < 4 || !self.win_len.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "window length {} must be a positive multiple of 4",
                self.win_len
            )));
        }
        if self.hop * 4 != self.win_len {
            return Err(Error::InvalidArgument(format!(
                "hop {} must equal win_len / 4",
                self.hop
            )));
        }
        if self.fft_size < self.win_len || !self.fft_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "fft size {} must be even and at least the window length",
                self.fft_size
            )));
        }
        Ok(())
    }

    /// Bins of the one-sided spectrum, `fft_size / 2 + 1`.
    pub fn full_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Bins presented to the network (Nyquist dropped).
    pub fn network_bins(&self) -> usize {
        self.fft_size / 2
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Sample count that produces exactly `frames` analysis frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        frames * self.hop
    }

    pub fn window(&self) -> Array1<f64> {
        // periodic Hamming
        let n = self.win_len as f64;
        Array1::from_shape_fn(self.win_len, |i| {
            0.54 - 0.46 * (2.0 * PI * i as f64 / n).cos()
        })
    }
}

/// Nonnegative magnitudes, `[audio_channels, bins, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Array3<f64>,
    pub config: StftConfig,
}

/// Phases in `(-pi, pi]`, `[audio_channels, fft_size / 2 + 1, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrogram {
    pub values: Array3<f64>,
    pub config: StftConfig,
}

impl MagnitudeSpectrogram {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn bins(&self) -> usize {
        self.values.dim().1
    }

    pub fn frames(&self) -> usize {
        self.values.dim().2
    }

    /// The lower `fft_size / 2` bins, the network's input plane.
    pub fn network_bins(&self) -> Array3<f64> {
        let n = self.config.network_bins().min(self.bins());
        self.values.slice(s![.., ..n, ..]).to_owned()
    }

    /// Wraps a network output; the Nyquist row is restored as zero.
    pub fn from_network_bins(values: Array3<f64>, config: StftConfig) -> Result<Self> {
        let (ch, bins, frames) = values.dim();
        if bins != config.network_bins() {
            return Err(Error::Shape(format!(
                "expected {} bins, got {bins}",
                config.network_bins()
            )));
        }
        let mut full = Array3::zeros((ch, config.full_bins(), frames));
        full.slice_mut(s![.., ..bins, ..]).assign(&values);
        Ok(Self {
            values: full,
            config,
        })
    }
}

pub struct Stft {
    config: StftConfig,
    window: Array1<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window(),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    fn pad(&self) -> usize {
        if self.config.center {
            self.config.win_len / 2
        } else {
            0
        }
    }

    /// Analysis. Frame `t` is centred on sample `t * hop` (reflect padding at
    /// both ends); `ceil(len / hop)` frames are produced.
    pub fn analyze(&self, w: &Waveform) -> Result<(MagnitudeSpectrogram, PhaseSpectrogram)> {
        if w.frames() == 0 {
            return Err(Error::InvalidWaveform("empty waveform".into()));
        }
        let cfg = &self.config;
        let frames = cfg.frames_for(w.frames());
        let bins = cfg.full_bins();
        let mut mag = Array3::zeros((w.channels(), bins, frames));
        let mut phase = Array3::zeros((w.channels(), bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        for ch in 0..w.channels() {
            let padded = self.padded_channel(&w.channel(ch).to_vec(), frames);
            for t in 0..frames {
                let start = t * cfg.hop;
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (i, (b, &wv)) in buf.iter_mut().zip(self.window.iter()).enumerate() {
                    *b = Complex::new(padded[start + i] * wv, 0.0);
                }
                self.forward.process(&mut buf);
                for k in 0..bins {
                    mag[[ch, k, t]] = buf[k].norm();
                    let mut ph = buf[k].arg();
                    if ph <= -PI {
                        ph = PI;
                    }
                    phase[[ch, k, t]] = ph;
                }
            }
        }
        Ok((
            MagnitudeSpectrogram {
                values: mag,
                config: *cfg,
            },
            PhaseSpectrogram {
                values: phase,
                config: *cfg,
            },
        ))
    }

    fn padded_channel(&self, x: &[f64], frames: usize) -> Vec<f64> {
        let pad = self.pad();
        let total = (frames - 1) * self.config.hop + self.config.win_len;
        (0..total)
            .map(|i| {
                let pos = i as isize - pad as isize;
                reflect_index(pos, x.len()).map(|j| x[j]).unwrap_or(0.0)
            })
            .collect()
    }

    /// Synthesis from a magnitude/phase pair. Accepts magnitudes with either
    /// the full or the network bin count (missing Nyquist taken as zero).
    pub fn synthesize(
        &self,
        mag: &MagnitudeSpectrogram,
        phase: &PhaseSpectrogram,
        out_len: usize,
        sample_rate: u32,
    ) -> Result<Waveform> {
        let cfg = &self.config;
        let (ch, mbins, frames) = mag.values.dim();
        let (pch, pbins, pframes) = phase.values.dim();
        if ch != pch || frames != pframes {
            return Err(Error::Shape(format!(
                "magnitude {:?} and phase {:?} disagree",
                mag.values.dim(),
                phase.values.dim()
            )));
        }
        if pbins != cfg.full_bins() || !(mbins == cfg.full_bins() || mbins == cfg.network_bins())
        {
            return Err(Error::Shape(format!(
                "bin counts {mbins}/{pbins} do not match fft size {}",
                cfg.fft_size
            )));
        }
        let pad = self.pad();
        let total = (frames.max(1) - 1) * cfg.hop + cfg.win_len;
        let mut out = Array2::zeros((ch, out_len));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        for t in 0..frames {
            for (i, &wv) in self.window.iter().enumerate() {
                norm[t * cfg.hop + i] += wv * wv;
            }
        }
        let scale = 1.0 / cfg.fft_size as f64;
        for c in 0..ch {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..frames {
                let n = cfg.fft_size;
                for k in 0..cfg.full_bins() {
                    let m = if k < mbins { mag.values[[c, k, t]] } else { 0.0 };
                    let z = Complex::from_polar(m, phase.values[[c, k, t]]);
                    let z = if k == 0 || k == n / 2 { Complex::new(z.re, 0.0) } else { z };
                    buf[k] = z;
                    if k != 0 && k != n / 2 {
                        buf[n - k] = z.conj();
                    }
                }
                self.inverse.process(&mut buf);
                let start = t * cfg.hop;
                for (i, &wv) in self.window.iter().enumerate() {
                    acc[start + i] += buf[i].re * scale * wv;
                }
            }
            for (i, o) in out.row_mut(c).iter_mut().enumerate() {
                let j = i + pad;
                if j < total && norm[j] > 1e-12 {
                    *o = acc[j] / norm[j];
                }
            }
        }
        Waveform::new(out, sample_rate)
    }
}

fn reflect_index(pos: isize, len: usize) -> Option<usize> {
    let n = len as isize;
    if (0..n).contains(&pos) {
        return Some(pos as usize);
    }
    if n < 2 {
        return None;
    }
    let mirrored = if pos < 0 { -pos } else { 2 * (n - 1) - pos };
    (0..n).contains(&mirrored).then_some(mirrored as usize)
}

/// One-shot analysis with the given configuration.
pub fn stft(w: &Waveform, cfg: StftConfig) -> Result<(MagnitudeSpectrogram, PhaseSpectrogram)> {
    Stft::new(cfg)?.analyze(w)
}

/// One-shot synthesis; output rate is taken from `sample_rate`.
pub fn istft(
    mag: &MagnitudeSpectrogram,
    phase: &PhaseSpectrogram,
    out_len: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    Stft::new(mag.config)?.synthesize(mag, phase, out_len, sample_rate)
}

/// Per-frame energy of the full two-sided spectrum divided by the FFT size.
pub fn frame_spectral_energy(mag: ArrayView2<'_, f64>, fft_size: usize) -> Vec<f64> {
    let bins = mag.nrows();
    (0..mag.ncols())
        .map(|t| {
            let col = mag.column(t);
            let mut e = 0.0;
            for (k, &m) in col.iter().enumerate() {
                let weight = if k == 0 || (k == bins - 1 && fft_size.is_multiple_of(2)) { 1.0 } else { 2.0 };
                e += weight * m * m;
            }
            e / fft_size as f64
        })
        .collect()
}
