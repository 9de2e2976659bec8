//! Python bindings: configs, training, evaluation and the standalone
//! building blocks (codec, generator, HSIC, PCGrad).

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fakescope::codec::{self, QualityFactor};
use fakescope::harness::{self, Metrics};
use fakescope::image::GrayImage;
use fakescope::losses::{self, HsicKernel};
use fakescope::model::{CheckpointInfo, ModelParams};
use fakescope::synth::{self, Regime, IMAGE_SIZE};
use fakescope::tensor::Tensor;

fn py_err(e: fakescope::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse<T>(s: &str) -> PyResult<T>
where
    T: std::str::FromStr<Err = fakescope::Error>,
{
    s.parse().map_err(py_err)
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py_json<'py>(py: Python<'py>, s: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (s,))
}

fn quality(q: u8) -> PyResult<QualityFactor> {
    QualityFactor::new(q).map_err(py_err)
}

/// Training configuration. Keyword arguments override the defaults; unknown
/// keys raise `ValueError`.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: harness::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(harness::TrainConfig::default()).map_err(json_err)?;
        if let Some(kw) = kwargs {
            let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
            let patch: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(&text).map_err(json_err)?;
            let obj = value.as_object_mut().expect("config serializes to an object");
            obj.extend(patch);
        }
        let inner: harness::TrainConfig = serde_json::from_value(value).map_err(json_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: harness::TrainConfig = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &serde_json::to_string(&self.inner).map_err(json_err)?)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(variant={}, seed={}, n_train={}, epochs={})",
            self.inner.variant, self.inner.seed, self.inner.n_train, self.inner.epochs
        )
    }
}

/// Detector parameters.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    config: harness::TrainConfig,
    steps: usize,
}

#[pymethods]
impl PyModel {
    /// Fresh random parameters.
    #[staticmethod]
    fn init(seed: u64) -> Self {
        Self {
            params: ModelParams::init(seed),
            config: harness::TrainConfig {
                seed,
                ..Default::default()
            },
            steps: 0,
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, info) = ModelParams::load(&path).map_err(py_err)?;
        let config = if info.config.is_null() {
            harness::TrainConfig {
                seed: info.seed,
                ..Default::default()
            }
        } else {
            serde_json::from_value(info.config).map_err(json_err)?
        };
        Ok(Self {
            params,
            config,
            steps: info.step as usize,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let info = CheckpointInfo {
            seed: self.config.seed,
            step: self.steps as u64,
            config: serde_json::to_value(&self.config).map_err(json_err)?,
        };
        self.params.save(&path, &info).map_err(py_err)
    }

    /// Accuracy on a regime's test set; `n_test` defaults to the config value.
    #[pyo3(signature = (regime, n_test = None))]
    fn evaluate<'py>(&self, py: Python<'py>, regime: &str, n_test: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let regime: Regime = parse(regime)?;
        let mut cfg = self.config.clone();
        if let Some(n) = n_test {
            cfg.n_test = n;
        }
        let m = py
            .detach(|| harness::evaluate(&self.params, regime, &cfg))
            .map_err(py_err)?;
        to_py_json(py, &serde_json::to_string(&m).map_err(json_err)?)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Train one model; returns `(model, metrics)` with metrics as a dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyTrainConfig) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg = config.inner.clone();
    let out = py.detach(|| harness::train(&cfg)).map_err(py_err)?;
    let metrics = metrics_dict(py, &out.metrics)?;
    Ok((
        PyModel {
            params: out.params,
            steps: out.metrics.steps,
            config: cfg,
        },
        metrics,
    ))
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyAny>> {
    to_py_json(py, &m.to_json().map_err(py_err)?)
}

/// JPEG-style roundtrip of a row-major grayscale image.
#[pyfunction]
fn compress(pixels: Vec<f64>, width: usize, height: usize, quality_factor: u8) -> PyResult<Vec<f64>> {
    let img = GrayImage::new(width, height, pixels).map_err(py_err)?;
    let out = codec::compress(&img, quality(quality_factor)?).map_err(py_err)?;
    Ok(out.into_pixels())
}

/// Scaled luminance quantization table for a quality factor.
#[pyfunction]
fn quant_table(quality_factor: u8) -> PyResult<Vec<u16>> {
    let t = codec::scale_quant_table(&codec::QuantTable::luminance(), quality(quality_factor)?);
    Ok(t.entries().to_vec())
}

/// Synthetic image as a row-major list of `IMAGE_SIZE`² pixels.
#[pyfunction]
fn gen_image(fake: bool, seed: u64) -> Vec<f64> {
    synth::gen_image(fake, seed).into_pixels()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect()).map_err(py_err)
}

/// HSIC estimate between two row-aligned feature matrices.
#[pyfunction]
#[pyo3(signature = (x, y, kernel = "rbf_median"))]
fn hsic(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, kernel: &str) -> PyResult<f64> {
    let kernel: HsicKernel = parse(kernel)?;
    losses::hsic_value(&matrix(x)?, &matrix(y)?, kernel).map_err(py_err)
}

/// Symmetric conflict projection; returns the combined direction.
#[pyfunction]
fn pcgrad(g_main: Vec<f64>, g_rev: Vec<f64>) -> PyResult<Vec<f64>> {
    fakescope::cgc::pcgrad_project(&g_main, &g_rev).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "fakescope")]
fn fakescope_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(quant_table, m)?)?;
    m.add_function(wrap_pyfunction!(gen_image, m)?)?;
    m.add_function(wrap_pyfunction!(hsic, m)?)?;
    m.add_function(wrap_pyfunction!(pcgrad, m)?)?;
    m.add("IMAGE_SIZE", IMAGE_SIZE)?;
    Ok(())
}
