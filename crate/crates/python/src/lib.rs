//! Python bindings: operators, the denoiser, metrics, phantoms and the
//! experiment runner. Arrays cross the boundary as flat lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ddip_core::autodiff::Tensor;
use ddip_core::denoiser::{build_denoiser, load_checkpoint, save_checkpoint, DenoiserConfig, DenoiserParams};
use ddip_core::harness::{reconstruct_measurements, run_experiment_with, ExperimentConfig};
use ddip_core::operators::{Operator as CoreOperator, OperatorSpec};
use ddip_core::phantoms::{self, EllipseSpec, OodKind, OodVolumeSpec};
use ddip_core::schedule::NoiseSchedule;

fn err(e: ddip_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Linear forward model with its noise level.
#[pyclass(frozen)]
struct Operator {
    inner: CoreOperator,
}

impl Operator {
    fn from_spec(spec: OperatorSpec) -> PyResult<Self> {
        Ok(Operator {
            inner: spec.build().map_err(err)?,
        })
    }
}

#[pymethods]
impl Operator {
    #[staticmethod]
    #[pyo3(signature = (image_size, views, sigma_y = 0.0))]
    fn sparse_view_ct(image_size: usize, views: usize, sigma_y: f64) -> PyResult<Self> {
        Self::from_spec(OperatorSpec::sparse_view_ct(image_size, views, sigma_y))
    }

    #[staticmethod]
    #[pyo3(signature = (image_size, sigma_y = 0.0))]
    fn identity(image_size: usize, sigma_y: f64) -> PyResult<Self> {
        Self::from_spec(OperatorSpec::identity(image_size, sigma_y))
    }

    /// Builds an operator from the JSON form of its spec.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: OperatorSpec = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Self::from_spec(spec)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.spec()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn image_len(&self) -> usize {
        self.inner.image_len()
    }

    #[getter]
    fn measurement_len(&self) -> usize {
        self.inner.measurement_len()
    }

    fn hash(&self) -> String {
        self.inner.spec().hash()
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(&x).map_err(err)
    }

    fn adjoint(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.adjoint(&y).map_err(err)
    }

    fn simulate(&self, x: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        self.inner.simulate(&x, seed).map_err(err)
    }

    #[pyo3(signature = (y, iters = 30))]
    fn pseudo_inverse(&self, y: Vec<f64>, iters: usize) -> PyResult<Vec<f64>> {
        self.inner.pseudo_inverse(&y, iters).map_err(err)
    }
}

/// ε-prediction UNet weights.
#[pyclass(frozen)]
struct Denoiser {
    inner: DenoiserParams,
}

#[pymethods]
impl Denoiser {
    #[staticmethod]
    #[pyo3(signature = (image_size = 32, base_channels = 8, seed = 0))]
    fn build(image_size: usize, base_channels: usize, seed: u64) -> PyResult<Self> {
        let config = DenoiserConfig {
            image_size,
            base_channels,
            ..DenoiserConfig::default()
        };
        Ok(Denoiser {
            inner: build_denoiser(&config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Denoiser {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.image_size
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_base_params()
    }

    fn base_hash(&self) -> String {
        self.inner.base_hash()
    }

    /// Predicted noise for one flattened image at timestep `t`.
    fn predict_eps(&self, x_t: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
        let s = self.inner.config.image_size;
        let x = Tensor::new(vec![1, 1, s, s], x_t).map_err(err)?;
        Ok(self.inner.predict_eps(&x, t).map_err(err)?.into_data())
    }
}

#[pyfunction]
#[pyo3(signature = (x, reference, data_range = 1.0))]
fn psnr(x: Vec<f64>, reference: Vec<f64>, data_range: f64) -> PyResult<f64> {
    ddip_core::metrics::psnr(&x, &reference, data_range).map_err(err)
}

#[pyfunction]
fn ssim(x: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    ddip_core::metrics::ssim(&x, &reference).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (seed, image_size = 32))]
fn ellipse_phantom(seed: u64, image_size: usize) -> PyResult<Vec<f64>> {
    let spec = EllipseSpec {
        image_size,
        ..EllipseSpec::default()
    };
    phantoms::sample_ellipse_image(&spec, seed).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (seed, kind = "rectangles", slices = 16, correlation = 0.8, image_size = 32))]
fn ood_volume(seed: u64, kind: &str, slices: usize, correlation: f64, image_size: usize) -> PyResult<Vec<Vec<f64>>> {
    let kind = match kind {
        "rectangles" => OodKind::Rectangles,
        "disks_bars" => OodKind::DisksBars,
        "smooth_blobs" => OodKind::SmoothBlobs,
        other => return Err(PyValueError::new_err(format!("unknown volume kind `{other}`"))),
    };
    let spec = OodVolumeSpec {
        kind,
        image_size,
        slices,
        correlation,
        ..OodVolumeSpec::default()
    };
    phantoms::sample_ood_volume(&spec, seed).map_err(err)
}

/// DDIM timesteps of the standard schedule, from the first to the last.
#[pyfunction]
fn standard_timesteps() -> Vec<usize> {
    NoiseSchedule::standard().steps().to_vec()
}

fn parse_config(text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml(text).map_err(err)
}

/// Runs an experiment described by a TOML string and returns its summary.
#[pyfunction]
#[pyo3(signature = (config_toml, denoiser = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_toml: &str,
    denoiser: Option<&Denoiser>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config_toml)?;
    let report = run_experiment_with(&cfg, denoiser.map(|d| &d.inner)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("label", &report.label)?;
    out.set_item("mean_psnr", report.mean_psnr)?;
    out.set_item("mean_ssim", report.mean_ssim)?;
    out.set_item("psnr", report.rows.iter().map(|r| r.psnr).collect::<Vec<_>>())?;
    out.set_item("ssim", report.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())?;
    out.set_item("adapt_steps", report.counters.adapt_steps)?;
    out.set_item("volume", report.volume)?;
    Ok(out)
}

/// Reconstructs measurements `ys` (one list per slice) with the method of
/// the TOML configuration.
#[pyfunction]
#[pyo3(signature = (config_toml, operator, ys, denoiser = None))]
fn reconstruct(
    config_toml: &str,
    operator: &Operator,
    ys: Vec<Vec<f64>>,
    denoiser: Option<&Denoiser>,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = parse_config(config_toml)?;
    let (volume, _) =
        reconstruct_measurements(&cfg, denoiser.map(|d| &d.inner), operator.inner.spec(), &ys).map_err(err)?;
    Ok(volume)
}

#[pymodule]
fn ddip(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Operator>()?;
    m.add_class::<Denoiser>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ellipse_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(ood_volume, m)?)?;
    m.add_function(wrap_pyfunction!(standard_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    Ok(())
}
