//! Python bindings. Audio crosses the boundary as float64 arrays shaped
//! `[channels, frames]`; spectrograms as `[channels, bins, frames]`.

use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use reverbswap::audio::{self, Waveform};
use reverbswap::checkpoint::Checkpoint;
use reverbswap::cli::{convert_audio, main_with_args, RunLog};
use reverbswap::model::{ModelConfig, ModelParams};
use reverbswap::nn::Params;
use reverbswap::reverb::{self, PresetSpace, Split};
use reverbswap::stft::{MagnitudeSpectrogram, PhaseSpectrogram, Stft, StftConfig};
use reverbswap::{databus, metrics};

type Spectrogram<'py> = Bound<'py, PyArray3<f64>>;

fn err(e: reverbswap::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn wave(x: PyReadonlyArray2<'_, f64>, rate: u32) -> PyResult<Waveform> {
    Waveform::new(x.as_array().to_owned(), rate).map_err(err)
}

fn stft_for(window: usize) -> PyResult<Stft> {
    Stft::new(StftConfig::with_window(window)).map_err(err)
}

#[pyfunction]
fn load_wav<'py>(py: Python<'py>, path: &str) -> PyResult<(Bound<'py, PyArray2<f64>>, u32)> {
    let w = audio::load_wav(path).map_err(err)?;
    let rate = w.sample_rate();
    Ok((w.into_samples().into_pyarray(py), rate))
}

#[pyfunction]
fn save_wav(path: &str, samples: PyReadonlyArray2<'_, f64>, rate: u32) -> PyResult<()> {
    audio::save_wav(&wave(samples, rate)?, path).map_err(err)
}

/// Returns `(magnitude, phase)`.
#[pyfunction]
#[pyo3(signature = (samples, rate, window = 2048))]
fn stft<'py>(
    py: Python<'py>,
    samples: PyReadonlyArray2<'_, f64>,
    rate: u32,
    window: usize,
) -> PyResult<(Spectrogram<'py>, Spectrogram<'py>)> {
    let (m, p) = stft_for(window)?.analyze(&wave(samples, rate)?).map_err(err)?;
    Ok((m.values.into_pyarray(py), p.values.into_pyarray(py)))
}

#[pyfunction]
#[pyo3(signature = (magnitude, phase, length, rate, window = 2048))]
fn istft<'py>(
    py: Python<'py>,
    magnitude: PyReadonlyArray3<'_, f64>,
    phase: PyReadonlyArray3<'_, f64>,
    length: usize,
    rate: u32,
    window: usize,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let s = stft_for(window)?;
    let cfg = *s.config();
    let mag = MagnitudeSpectrogram { values: magnitude.as_array().to_owned(), config: cfg };
    let ph = PhaseSpectrogram { values: phase.as_array().to_owned(), config: cfg };
    let w = s.synthesize(&mag, &ph, length, rate).map_err(err)?;
    Ok(w.into_samples().into_pyarray(py))
}

#[pyfunction]
fn mix_bus<'py>(
    py: Python<'py>,
    source: PyReadonlyArray2<'_, f64>,
    reverb: PyReadonlyArray2<'_, f64>,
    gamma: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let rate = audio::CANONICAL_RATE;
    let out = databus::mix_bus(&wave(source, rate)?, &wave(reverb, rate)?, gamma).map_err(err)?;
    Ok(out.into_samples().into_pyarray(py))
}

#[pyclass(name = "ReverbPreset", from_py_object)]
#[derive(Clone)]
struct PyPreset {
    inner: reverb::ReverbPreset,
}

#[pymethods]
impl PyPreset {
    /// Draws a preset from the training (`"train"`) or validation space.
    #[staticmethod]
    #[pyo3(signature = (seed, split = "train"))]
    fn sample(seed: u64, split: &str) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        };
        Ok(Self { inner: reverb::sample_preset(&PresetSpace::for_split(split), seed) })
    }

    #[getter]
    fn preset_id(&self) -> String {
        self.inner.preset_id.clone()
    }

    #[getter]
    fn rt60(&self) -> f64 {
        self.inner.rt60
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// 100%-wet render at 44.1 kHz, same length as the input.
    fn render_wet<'py>(&self, py: Python<'py>, dry: PyReadonlyArray2<'_, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let w = reverb::render_wet(&wave(dry, audio::CANONICAL_RATE)?, &self.inner).map_err(err)?;
        Ok(w.into_samples().into_pyarray(py))
    }

    fn impulse_response<'py>(&self, py: Python<'py>, length: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let w = reverb::impulse_response(&self.inner, length).map_err(err)?;
        Ok(w.into_samples().into_pyarray(py))
    }
}

#[pyfunction]
fn estimate_rt60(ir: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    reverb::estimate_rt60(&wave(ir, audio::CANONICAL_RATE)?).map_err(err)
}

#[pyfunction]
fn si_sdr(est: PyReadonlyArray2<'_, f64>, reference: PyReadonlyArray2<'_, f64>, rate: u32) -> PyResult<f64> {
    metrics::si_sdr(&wave(est, rate)?, &wave(reference, rate)?).map_err(err)
}

#[pyfunction]
fn stoi(est: PyReadonlyArray2<'_, f64>, reference: PyReadonlyArray2<'_, f64>, rate: u32) -> PyResult<f64> {
    metrics::stoi(&wave(est, rate)?, &wave(reference, rate)?).map_err(err)
}

#[pyfunction]
fn srmr(x: PyReadonlyArray2<'_, f64>, rate: u32) -> PyResult<f64> {
    metrics::srmr(&wave(x, rate)?).map_err(err)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised weights; `reduced` selects the 128x96 model.
    #[new]
    #[pyo3(signature = (seed = 0, reduced = false))]
    fn new(seed: u64, reduced: bool) -> PyResult<Self> {
        let cfg = if reduced { ModelConfig::reduced() } else { ModelConfig::default() };
        Ok(Self { inner: ModelParams::new(cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).and_then(|c| c.params()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(&self.inner, 0, 0).save(path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.generator.param_count() + self.inner.discriminator.param_count()
    }

    #[getter]
    fn channels(&self) -> Vec<usize> {
        self.inner.config.channels.clone()
    }

    /// Samples per model segment.
    #[getter]
    fn segment_frames(&self) -> usize {
        self.inner.config.stft_config().samples_for_frames(self.inner.config.time_frames)
    }

    /// Gives `source` the reverb of `reference`; both stereo at 44.1 kHz.
    fn convert<'py>(
        &self,
        py: Python<'py>,
        source: PyReadonlyArray2<'_, f64>,
        reference: PyReadonlyArray2<'_, f64>,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let rate = audio::CANONICAL_RATE;
        let out = convert_audio(&self.inner, &wave(source, rate)?, &wave(reference, rate)?).map_err(err)?;
        Ok(out.into_samples().into_pyarray(py))
    }
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
#[pyo3(signature = (args, quiet = false))]
fn cli_main(args: Vec<String>, quiet: bool) -> u8 {
    let mut log = if quiet { RunLog::quiet() } else { RunLog::stderr() };
    main_with_args(std::iter::once("reverbswap".to_string()).chain(args), &mut log)
}

#[pymodule]
pub fn reverbswap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(istft, m)?)?;
    m.add_function(wrap_pyfunction!(mix_bus, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_rt60, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(stoi, m)?)?;
    m.add_function(wrap_pyfunction!(srmr, m)?)?;
    m.add_function(wrap_pyfunction!(cli_main, m)?)?;
    m.add_class::<PyPreset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
