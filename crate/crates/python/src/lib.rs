//! Python module `convshare`: model configuration, the model itself,
//! convolution primitives, the pass planner, the verification suites and
//! the optical simulator.
//!
//! Tensors cross the boundary as flat row-major float lists plus a shape.

use std::collections::HashMap;

use convshare_core::model::attention_heatmaps;
use convshare_core::optics::{self, DeviceSpec};
use convshare_core::plan::{self, format_latency};
use convshare_core::simulate::{compare_paths, SimulationMode};
use convshare_core::training::{self, metrics_csv, toy_model_config, DatasetKind, TrainConfig};
use convshare_core::verify::{run_all, VerifyOptions, DEFAULT_SEED};
use convshare_core::{tensor, Checkpoint, ConvShareViT, Error, PaddingMode, SharedGroupedConv, Tensor};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Dimension(_) | Error::Config(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Checkpoint { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor_from(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

fn padding(name: &str) -> PyResult<PaddingMode> {
    match name {
        "valid" => Ok(PaddingMode::Valid),
        "same" => Ok(PaddingMode::Same),
        other => Err(PyValueError::new_err(format!("padding must be 'valid' or 'same', got {other:?}"))),
    }
}

fn dataset(name: &str) -> PyResult<DatasetKind> {
    match name {
        "quadrant-blob" => Ok(DatasetKind::QuadrantBlob),
        "two-class-texture" => Ok(DatasetKind::TwoClassTexture),
        other => Err(PyValueError::new_err(format!("unknown dataset {other:?}"))),
    }
}

fn device(resolution: usize, clock_hz: f64) -> PyResult<DeviceSpec> {
    DeviceSpec::new(resolution, clock_hz).map_err(py_err)
}

#[pyclass(name = "ModelConfig")]
struct PyModelConfig {
    inner: convshare_core::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// 32×32 RGB input, 13×13 single-head tokens, 9 blocks, 100 classes.
    #[staticmethod]
    fn cifar100_13x13() -> Self {
        PyModelConfig {
            inner: convshare_core::ModelConfig::cifar100_13x13(),
        }
    }

    #[staticmethod]
    fn cifar100_16x16() -> Self {
        PyModelConfig {
            inner: convshare_core::ModelConfig::cifar100_16x16(),
        }
    }

    /// Two-block single-channel model for a synthetic dataset.
    #[staticmethod]
    #[pyo3(signature = (dataset_name = "quadrant-blob", image_size = 16))]
    fn toy(dataset_name: &str, image_size: usize) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: toy_model_config(dataset(dataset_name)?, image_size),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: convshare_core::ModelConfig::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.inner.tokens()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[getter]
    fn embed(&self) -> (usize, usize) {
        (self.inner.embed_h, self.inner.embed_w)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.inner.to_json())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: ConvShareViT,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: ConvShareViT::init(&config.inner, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// `(name, shape)` of every trainable tensor, in checkpoint order.
    fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.inner
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    fn image_shape(&self) -> Vec<usize> {
        let c = self.inner.config();
        vec![c.channels, c.image_size, c.image_size]
    }

    /// Logits for one flat `[C, S, S]` image.
    fn forward(&self, image: Vec<f64>) -> PyResult<Vec<f64>> {
        let img = tensor_from(image, self.image_shape())?.to_precision(self.inner.precision());
        Ok(self.inner.forward(&img).map_err(py_err)?.into_data())
    }

    /// One flat `S × S` class-token heatmap per block.
    fn attention_heatmaps(&self, image: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let img = tensor_from(image, self.image_shape())?.to_precision(self.inner.precision());
        let (_, traces) = self.inner.forward_traced(&img).map_err(py_err)?;
        let s = self.inner.config().image_size;
        (0..traces.len())
            .map(|l| Ok(attention_heatmaps(&traces, l, s).map_err(py_err)?.into_data()))
            .collect()
    }

    #[pyo3(signature = (path, seed = 0, epoch = 0))]
    fn save(&self, path: &str, seed: u64, epoch: usize) -> PyResult<()> {
        Checkpoint::capture(&self.inner, seed, epoch).save(path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: Checkpoint::load(path).and_then(|c| c.restore()).map_err(py_err)?,
        })
    }
}

#[pyclass(name = "InferencePlan")]
struct PyInferencePlan {
    inner: plan::InferencePlan,
}

#[pymethods]
impl PyInferencePlan {
    #[getter]
    fn total(&self) -> usize {
        self.inner.total
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity
    }

    #[getter]
    fn per_block(&self) -> HashMap<&'static str, usize> {
        self.inner.per_block.stages().into_iter().collect()
    }

    #[getter]
    fn latency_s(&self) -> f64 {
        self.inner.latency_s
    }

    /// Latency rounded for display, e.g. `"2.8 ms"`.
    fn latency_display(&self) -> String {
        format_latency(self.inner.latency_s)
    }

    fn table(&self) -> String {
        self.inner.table()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Channels per pass: `R // (m + n - 1)`.
#[pyfunction]
fn capacity(resolution: usize, m: usize, n: usize) -> PyResult<usize> {
    optics::capacity(resolution, m, n).map_err(py_err)
}

/// Pass counts of `config` (default: the 13×13 reference model).
#[pyfunction]
#[pyo3(signature = (config = None, device_res = 2160, device_clock = 2e6))]
fn plan_inferences(config: Option<PyRef<'_, PyModelConfig>>, device_res: usize, device_clock: f64) -> PyResult<PyInferencePlan> {
    let c = config.map_or_else(convshare_core::ModelConfig::cifar100_13x13, |c| c.inner.clone());
    Ok(PyInferencePlan {
        inner: plan::plan_inferences(&c, &device(device_res, device_clock)?).map_err(py_err)?,
    })
}

#[pyfunction]
fn estimate_latency(inferences: usize, device_clock: f64) -> PyResult<f64> {
    Ok(plan::estimate_latency(inferences, &device(1, device_clock)?))
}

/// Grouped 2-D correlation; returns `(data, shape)`.
#[pyfunction]
#[pyo3(signature = (input, input_shape, kernels, kernel_shape, padding_mode = "valid", groups = 1))]
fn conv2d(
    input: Vec<f64>,
    input_shape: Vec<usize>,
    kernels: Vec<f64>,
    kernel_shape: Vec<usize>,
    padding_mode: &str,
    groups: usize,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let y = tensor::conv2d(
        &tensor_from(input, input_shape)?,
        &tensor_from(kernels, kernel_shape)?,
        padding(padding_mode)?,
        groups,
    )
    .map_err(py_err)?;
    let shape = y.shape().to_vec();
    Ok((y.into_data(), shape))
}

/// Valid-padding shared grouped convolution: `[T, H, W]` tokens against a
/// `[M, g, H, W]` bank, returning the flat `[T/g, M]` outputs.
#[pyfunction]
#[pyo3(signature = (x, x_shape, kernels, kernel_shape, bias = None))]
fn shared_forward(
    x: Vec<f64>,
    x_shape: Vec<usize>,
    kernels: Vec<f64>,
    kernel_shape: Vec<usize>,
    bias: Option<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let k = tensor_from(kernels, kernel_shape)?;
    let g = k.shape().get(1).copied().unwrap_or(0);
    let m = k.shape()[0];
    let b = match bias {
        Some(b) => Some(tensor_from(b, vec![m])?),
        None => None,
    };
    let layer = SharedGroupedConv::new(k, g, b, PaddingMode::Valid).map_err(py_err)?;
    let x = tensor_from(x, x_shape)?;
    Ok(layer.forward_raw(&x).map_err(py_err)?.into_data())
}

/// Runs the equivalence suites; returns the JSON report.
#[pyfunction]
#[pyo3(signature = (seed = DEFAULT_SEED, inject_fault = false))]
fn verify(seed: u64, inject_fault: bool) -> PyResult<String> {
    Ok(run_all(VerifyOptions { seed, inject_fault }).map_err(py_err)?.to_json())
}

/// Optical against electronic logits for flat images; returns the JSON
/// report.
#[pyfunction]
#[pyo3(signature = (model, images, device_res = 2160, device_clock = 2e6, mode = "cells"))]
fn simulate(model: &PyModel, images: Vec<Vec<f64>>, device_res: usize, device_clock: f64, mode: &str) -> PyResult<String> {
    let mode = match mode {
        "cells" => SimulationMode::Cells,
        "canvas" => SimulationMode::Canvas,
        other => return Err(PyValueError::new_err(format!("mode must be 'cells' or 'canvas', got {other:?}"))),
    };
    let shape = model.image_shape();
    let imgs = images
        .into_iter()
        .map(|i| tensor_from(i, shape.clone()))
        .collect::<PyResult<Vec<_>>>()?;
    let report = compare_paths(&model.inner, &imgs, &device(device_res, device_clock)?, mode).map_err(py_err)?;
    Ok(serde_json::to_string_pretty(&report).expect("report serialises"))
}

/// Trains a fresh model on a synthetic dataset; returns the model and the
/// per-epoch metrics as CSV.
#[pyfunction]
#[pyo3(signature = (dataset_name = "quadrant-blob", epochs = 50, seed = 0, config = None))]
fn train_toy(dataset_name: &str, epochs: usize, seed: u64, config: Option<PyRef<'_, PyModelConfig>>) -> PyResult<(PyModel, String)> {
    let kind = dataset(dataset_name)?;
    let c = config.map_or_else(|| toy_model_config(kind, 16), |c| c.inner.clone());
    let mut model = ConvShareViT::init(&c, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
    let tc = TrainConfig::toy(kind, c.image_size, epochs, seed);
    let report = training::train(&mut model, &tc, |_| {}).map_err(py_err)?;
    Ok((PyModel { inner: model }, metrics_csv(&report.metrics)))
}

#[pymodule]
fn convshare(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyInferencePlan>()?;
    m.add_function(wrap_pyfunction!(capacity, m)?)?;
    m.add_function(wrap_pyfunction!(plan_inferences, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_latency, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(shared_forward, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
