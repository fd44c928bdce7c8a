use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use windscale::data::{self, QuantileMap, SynthConfig};
use windscale::diagnostics::{self, ScoreOptions, StormParams};
use windscale::edm::{karras_sigmas, member_seed, NoiseSchedule};
use windscale::grid::{read_grd1, write_grd1, FieldSequence, GridMeta, Tensor};
use windscale::physics::Boundary;
use windscale::pipeline::{self, RunConfig, SampleArgs};
use windscale::spectral::radial_spectrum;
use windscale::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A `[T, C, H, W]` float32 field sequence with grid metadata.
#[pyclass(name = "Field", module = "windscale_py", skip_from_py_object)]
#[derive(Clone)]
struct PyField {
    inner: FieldSequence,
}

#[pymethods]
impl PyField {
    #[new]
    #[pyo3(signature = (shape, data, channels, spacing=(1.0, 1.0, 1.0)))]
    fn new(shape: [usize; 4], data: Vec<f32>, channels: Vec<String>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let names: Vec<&str> = channels.iter().map(String::as_str).collect();
        let meta = GridMeta::new(shape[2], shape[3], &names)
            .and_then(|m| m.with_spacing(spacing.0, spacing.1, spacing.2))
            .map_err(to_py)?;
        let inner = FieldSequence::new(meta, Tensor::new(&shape, data).map_err(to_py)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_grd1(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_grd1(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.data().shape().to_vec()
    }

    #[getter]
    fn channels(&self) -> Vec<String> {
        self.inner.meta.channel_names.clone()
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let m = &self.inner.meta;
        (m.d_lat, m.d_lon, m.dt)
    }

    /// Flat row-major values.
    fn values(&self) -> Vec<f32> {
        self.inner.data().data().to_vec()
    }

    fn plane(&self, t: usize, c: usize) -> PyResult<Vec<f32>> {
        if t >= self.inner.steps() || c >= self.inner.channels() {
            return Err(PyValueError::new_err(format!("plane ({t}, {c}) out of range")));
        }
        Ok(self.inner.plane(t, c).to_vec())
    }

    fn window(&self, start: usize, len: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.window(start, len).map_err(to_py)?,
        })
    }

    /// Per-frame vorticity of the wind channels, flat `[T, H, W]`.
    #[pyo3(signature = (periodic=true))]
    fn vorticity(&self, periodic: bool) -> PyResult<Vec<f64>> {
        let b = if periodic { Boundary::Periodic } else { Boundary::OneSided };
        Ok(diagnostics::vorticity_series(&self.inner, b).map_err(to_py)?.into_data())
    }

    /// Radially binned power of one plane; `sum` equals its variance.
    fn radial_spectrum(&self, t: usize, c: usize) -> PyResult<Vec<f64>> {
        if t >= self.inner.steps() || c >= self.inner.channels() {
            return Err(PyValueError::new_err(format!("plane ({t}, {c}) out of range")));
        }
        Ok(radial_spectrum(&self.inner.plane_f64(t, c)).map_err(to_py)?.power)
    }

    fn __len__(&self) -> usize {
        self.inner.steps()
    }

    fn __repr__(&self) -> String {
        format!("Field(shape={:?}, channels={:?})", self.shape(), self.channels())
    }
}

/// Synthetic truth with channels `u`, `v`, `orog`; `config` is SynthConfig JSON.
#[pyfunction]
#[pyo3(signature = (config="{}"))]
fn gen_synthetic(config: &str) -> PyResult<PyField> {
    let cfg: SynthConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyField {
        inner: data::gen_synthetic(&cfg).map_err(to_py)?,
    })
}

/// Per-cell quantile map between two coarse sequences.
#[pyclass(name = "QuantileMap", module = "windscale_py")]
struct PyQuantileMap {
    inner: QuantileMap,
}

#[pymethods]
impl PyQuantileMap {
    #[staticmethod]
    fn fit(source: &PyField, target: &PyField, levels: usize) -> PyResult<Self> {
        Ok(Self {
            inner: data::qmap_fit(&source.inner, &target.inner, levels).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: QuantileMap::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn apply(&self, field: &PyField) -> PyResult<PyField> {
        Ok(PyField {
            inner: data::qmap_apply(&self.inner, &field.inner).map_err(to_py)?,
        })
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.n_quantiles
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
#[pyfunction]
fn ks_distance(a: Vec<f64>, b: Vec<f64>) -> f64 {
    data::ks_distance(&a, &b)
}

/// Persistent vorticity features; returns the storm report as a dict.
#[pyfunction]
#[pyo3(signature = (field, threshold, min_area=4, min_lifetime=3, max_travel=3.0))]
fn storm_count<'py>(
    py: Python<'py>,
    field: &PyField,
    threshold: f64,
    min_area: usize,
    min_lifetime: usize,
    max_travel: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let p = StormParams {
        threshold,
        min_area,
        min_lifetime,
        max_travel,
    };
    let report = diagnostics::storm_count(&field.inner, &p).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Noise levels of the reverse process, descending, ending in 0.
#[pyfunction]
#[pyo3(signature = (n_steps, sigma_min=0.002, sigma_max=80.0, rho=7.0))]
fn noise_levels(n_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> PyResult<Vec<f64>> {
    karras_sigmas(&NoiseSchedule {
        sigma_min,
        sigma_max,
        rho,
        n_steps,
    })
    .map_err(to_py)
}

#[pyfunction(name = "member_seed")]
fn py_member_seed(base: u64, member: u64) -> u64 {
    member_seed(base, member)
}

/// Parses and validates a run config, returning the fully defaulted config as a dict.
#[pyfunction]
fn resolve_config<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &RunConfig::from_json(text).map_err(to_py)?)
}

#[pyfunction]
fn gen_data(config: PathBuf, out: PathBuf) -> PyResult<Vec<PathBuf>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    pipeline::cmd_gen_data(&cfg, &out).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (truth, t_in, factor, k_c, out=None))]
fn make_pairs(truth: PathBuf, t_in: usize, factor: usize, k_c: f64, out: Option<PathBuf>) -> PyResult<Vec<PathBuf>> {
    let filter = windscale::spectral::FilterSpec::SpectralCutoff { k_c };
    pipeline::cmd_make_pairs(&truth, t_in, factor, filter, out.as_deref()).map_err(to_py)
}

#[pyfunction]
fn train_mean(config: PathBuf) -> PyResult<Vec<PathBuf>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    pipeline::cmd_train_mean(&cfg).map_err(to_py)
}

#[pyfunction]
fn train_diff(config: PathBuf, mode: &str) -> PyResult<Vec<PathBuf>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    let mode = mode.parse().map_err(to_py)?;
    pipeline::cmd_train_diff(&cfg, mode).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (diff_ckpt, input, members, steps, seed, mean_ckpt=None, out=None, batch=8))]
#[allow(clippy::too_many_arguments)]
fn sample(
    diff_ckpt: PathBuf,
    input: PathBuf,
    members: usize,
    steps: usize,
    seed: u64,
    mean_ckpt: Option<PathBuf>,
    out: Option<PathBuf>,
    batch: usize,
) -> PyResult<Vec<PathBuf>> {
    pipeline::cmd_sample(&SampleArgs {
        mean_ckpt,
        diff_ckpt,
        input,
        members,
        steps,
        seed,
        batch,
        out,
    })
    .map_err(to_py)
}

/// Writes the report directory and returns the score card as a dict.
#[pyfunction]
#[pyo3(signature = (pred, truth, out, points="", k_c=None))]
fn diagnose<'py>(
    py: Python<'py>,
    pred: PathBuf,
    truth: PathBuf,
    out: PathBuf,
    points: &str,
    k_c: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let pts = pipeline::parse_points(points).map_err(to_py)?;
    let card = pipeline::cmd_diagnose(&pred, &truth, &pts, &out, k_c, &ScoreOptions::default()).map_err(to_py)?;
    json_to_py(py, &card)
}

#[pymodule]
fn windscale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyField>()?;
    m.add_class::<PyQuantileMap>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(ks_distance, m)?)?;
    m.add_function(wrap_pyfunction!(storm_count, m)?)?;
    m.add_function(wrap_pyfunction!(noise_levels, m)?)?;
    m.add_function(wrap_pyfunction!(py_member_seed, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(make_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train_mean, m)?)?;
    m.add_function(wrap_pyfunction!(train_diff, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    Ok(())
}
