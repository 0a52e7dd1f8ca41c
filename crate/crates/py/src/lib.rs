//! Python bindings: dataset synthesis, WAV I/O, the two evaluation metrics
//! and inference from a trained checkpoint.

use std::path::PathBuf;

use mtnet::dataset::{self, DatasetManifest, DatasetSpec, Split, WordSpec};
use mtnet::metrics::{self, EvalSource};
use mtnet::model::{stored_dtype, Checkpoint, InferenceModel};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: mtnet::Error) -> PyErr {
    match e {
        mtnet::Error::Io { .. } | mtnet::Error::Wav { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Spectrogram correlation between a generated and a reference waveform.
#[pyfunction]
#[pyo3(signature = (generated, actual, sample_rate = 8000))]
fn corr2d(generated: Vec<f64>, actual: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    metrics::audio_corr2d(&generated, &actual, sample_rate).map_err(py_err)
}

/// Short-time objective intelligibility of `generated` against `actual`.
#[pyfunction]
#[pyo3(signature = (actual, generated, sample_rate = 8000))]
fn stoi(actual: Vec<f64>, generated: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    metrics::stoi(&actual, &generated, sample_rate).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (class_id, seed = 0, sample_rate = 8000))]
fn synthesize_word(class_id: usize, seed: u64, sample_rate: u32) -> Vec<f32> {
    let spec = WordSpec {
        sample_rate,
        ..WordSpec::default()
    };
    dataset::synthesize_word_audio(class_id, &spec, seed).samples().to_vec()
}

/// Returns `(samples, sample_rate)` of a mono 16-bit file.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let clip = dataset::wav_read(&path).map_err(py_err)?;
    Ok((clip.samples().to_vec(), clip.sample_rate))
}

#[pyfunction]
fn write_wav(path: PathBuf, samples: Vec<f32>, sample_rate: u32) -> PyResult<()> {
    dataset::wav_write(&path, &samples, sample_rate).map_err(py_err)
}

/// Writes a synthetic dataset and returns its checksum.
#[pyfunction]
#[pyo3(signature = (out, classes, train_per_class, test_per_class, seed = 0))]
fn build_dataset(out: PathBuf, classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> PyResult<String> {
    let spec = DatasetSpec::new(classes, train_per_class, test_per_class, seed);
    let m = dataset::build_dataset(&spec, &out).map_err(py_err)?;
    m.checksum(&out).map_err(py_err)
}

/// Mean `(corr2d, stoi)` of `<id>.wav` files in `wavs` (or of the references
/// themselves when `wavs` is None) over one split.
#[pyfunction]
#[pyo3(signature = (data, wavs = None, split = "test"))]
fn evaluate(data: PathBuf, wavs: Option<PathBuf>, split: &str) -> PyResult<(f64, f64)> {
    let m = DatasetManifest::load(&data).map_err(py_err)?;
    let split = Split::parse(split).map_err(py_err)?;
    let source = match &wavs {
        Some(w) => EvalSource::<f32>::Directory(w),
        None => EvalSource::GroundTruth,
    };
    let r = metrics::evaluate_set(&m, &data, split, source).map_err(py_err)?;
    if r.rows.is_empty() {
        return Err(PyValueError::new_err("nothing was evaluated"));
    }
    Ok((r.mean_corr2d(), r.mean_stoi()))
}

enum Model {
    F32(InferenceModel<f32>),
    F64(InferenceModel<f64>),
}

/// Image-to-waveform inference from a trained joint checkpoint.
#[pyclass(frozen)]
struct Generator {
    model: Model,
    #[pyo3(get)]
    sample_rate: Option<u32>,
}

#[pymethods]
impl Generator {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        fn load<T: mtnet::tensor::Scalar>(p: &std::path::Path) -> mtnet::Result<(InferenceModel<T>, Option<u32>)> {
            let c = Checkpoint::<T>::load(p)?;
            let rate = c.meta.get("sample_rate").and_then(|s| s.parse().ok());
            Ok((InferenceModel::from_checkpoint(c)?, rate))
        }
        let (model, sample_rate) = match stored_dtype(&checkpoint).map_err(py_err)?.as_str() {
            "f64" => load::<f64>(&checkpoint).map(|(m, r)| (Model::F64(m), r)),
            _ => load::<f32>(&checkpoint).map(|(m, r)| (Model::F32(m), r)),
        }
        .map_err(py_err)?;
        Ok(Self { model, sample_rate })
    }

    /// Padded output length in samples.
    #[getter]
    fn audio_length(&self) -> usize {
        match &self.model {
            Model::F32(m) => m.config().audio_length,
            Model::F64(m) => m.config().audio_length,
        }
    }

    /// Waveform for one PGM/PPM image file.
    fn generate(&self, image: PathBuf) -> PyResult<Vec<f32>> {
        let id = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let img = dataset::read_netpbm(&image, &id, 0).map_err(py_err)?;
        let one = std::slice::from_ref(&img);
        let out = match &self.model {
            Model::F32(m) => m.generate(one).map_err(py_err)?.remove(0),
            Model::F64(m) => m.generate(one).map_err(py_err)?.remove(0).into_iter().map(|v| v as f32).collect(),
        };
        Ok(out)
    }
}

#[pymodule]
fn mtnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(corr2d, m)?)?;
    m.add_function(wrap_pyfunction!(stoi, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_word, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Generator>()?;
    Ok(())
}
