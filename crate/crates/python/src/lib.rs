//! Python bindings: toy data, pretraining, direction discovery and the
//! sampling/editing drivers. Images cross the boundary as flat lists of
//! floats in row-major order.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdir::config::Settings as CoreSettings;
use hdir::denoiser::Denoiser;
use hdir::diffusion::NoiseSchedule;
use hdir::experiments::store::{denoiser_from_tensors, denoiser_tensors};
use hdir::experiments::{
    self, discovery_chain, estimate_factors, invert_and_edit,
    load_denoiser, load_discovery, make_dataset, rca_eval, save_denoiser, save_discovery, seeded_noise,
    DiscoveryModels,
};
use hdir::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Crc { .. } | Error::Parse { .. } | Error::MissingTensor(_) => {
            PyIOError::new_err(e.to_string())
        }
        Error::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let v = t.to_f64_vec();
    let width = t.shape().last().copied().unwrap_or(0).max(1);
    v.chunks(width).map(|c| c.to_vec()).collect()
}

/// Run settings in the `key = value` text format.
#[pyclass(name = "Settings", unsendable)]
pub struct PySettings {
    inner: CoreSettings,
}

#[pymethods]
impl PySettings {
    /// Defaults, overridden by any keys in `text`.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let inner = CoreSettings::from_text(text, "<python>".as_ref()).map_err(py_err)?;
        Ok(PySettings { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Short run name, e.g. `TOY16-400-20-8-2`.
    #[getter]
    fn run_name(&self) -> String {
        self.inner.discovery.name()
    }

    fn __repr__(&self) -> String {
        format!("Settings({})", self.inner.discovery.name())
    }
}

/// A pretrained noise predictor and its schedule.
#[pyclass(name = "DiffusionModel", unsendable)]
pub struct PyDiffusionModel {
    dm: Denoiser<f32>,
    sched: NoiseSchedule,
}

impl PyDiffusionModel {
    fn copy(dm: &Denoiser<f32>, sched: &NoiseSchedule) -> PyResult<Self> {
        let (dm, sched) = denoiser_from_tensors(&denoiser_tensors(dm, sched)).map_err(py_err)?;
        Ok(PyDiffusionModel { dm, sched })
    }
}

#[pymethods]
impl PyDiffusionModel {
    /// Renders the toy dataset and trains a fresh denoiser on it. Returns
    /// the model and the per-step losses.
    #[staticmethod]
    fn pretrain(settings: &PySettings) -> PyResult<(Self, Vec<f64>)> {
        let s = &settings.inner;
        s.denoiser.validate().map_err(py_err)?;
        let sched = NoiseSchedule::linear(s.diffusion_steps, s.beta_start, s.beta_end).map_err(py_err)?;
        let data = make_dataset(s.pretrain.dataset_size, s.pretrain.seed).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s.pretrain.seed);
        rng.set_stream(1);
        let dm = Denoiser::<f32>::new(s.denoiser, &mut rng).map_err(py_err)?;
        let losses = experiments::pretrain(&dm, &data, &sched, &s.pretrain).map_err(py_err)?;
        Ok((PyDiffusionModel { dm, sched }, losses))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (dm, sched) = load_denoiser::<f32>(&path).map_err(py_err)?;
        Ok(PyDiffusionModel { dm, sched })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_denoiser(&path, &self.dm, &self.sched).map_err(py_err)
    }

    #[getter]
    fn data_dim(&self) -> usize {
        self.dm.config().data_dim
    }

    /// Deterministic DDIM samples from seeded noise, `steps` sampling steps.
    #[pyo3(signature = (n, seed = 0, steps = 20))]
    fn sample(&self, n: usize, seed: u64, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let cfg = hdir::config::DiscoveryConfig {
            sample_steps: steps,
            ..Default::default()
        };
        let chain = discovery_chain(&self.dm, &self.sched, &cfg).map_err(py_err)?;
        let x_t = seeded_noise(n, self.dm.config().data_dim, seed);
        Ok(rows(&chain.sample(&x_t).map_err(py_err)?))
    }

    /// Trains shift block, discriminator and reconstructor on this model.
    /// Returns the trained directions and the metrics log as CSV.
    fn discover(&self, settings: &PySettings) -> PyResult<(PyDirections, String)> {
        let cfg = settings.inner.discovery.clone();
        let (models, log) = experiments::discover(&self.dm, &self.sched, &cfg).map_err(py_err)?;
        let base = Self::copy(&self.dm, &self.sched)?;
        let dirs = PyDirections {
            dm: base.dm,
            sched: base.sched,
            cfg,
            models,
        };
        Ok((dirs, log.to_csv()))
    }
}

/// Discovered h-space directions together with the frozen model they act on.
#[pyclass(name = "Directions", unsendable)]
pub struct PyDirections {
    dm: Denoiser<f32>,
    sched: NoiseSchedule,
    cfg: hdir::config::DiscoveryConfig,
    models: DiscoveryModels<f32>,
}

#[pymethods]
impl PyDirections {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let b = load_discovery::<f32>(&path).map_err(py_err)?;
        Ok(PyDirections {
            dm: b.dm,
            sched: b.sched,
            cfg: b.cfg,
            models: b.models,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_discovery(&path, &self.dm, &self.sched, &self.cfg, &self.models).map_err(py_err)
    }

    #[getter]
    fn count(&self) -> usize {
        self.cfg.directions
    }

    #[getter]
    fn max_magnitude(&self) -> f64 {
        self.cfg.max_magnitude
    }

    /// One unshifted sample from the noise that `traverse` uses for `seed`.
    #[pyo3(signature = (seed = 0))]
    fn sample(&self, seed: u64) -> PyResult<Vec<f64>> {
        let chain = discovery_chain(&self.dm, &self.sched, &self.cfg).map_err(py_err)?;
        let x_t = seeded_noise(1, self.dm.config().data_dim, seed);
        Ok(chain.sample(&x_t).map_err(py_err)?.to_f64_vec())
    }

    /// Images for `grid` magnitudes of direction `k` from one seed.
    #[pyo3(signature = (k, grid = 5, seed = 0))]
    fn traverse(&self, k: usize, grid: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let chain = discovery_chain(&self.dm, &self.sched, &self.cfg).map_err(py_err)?;
        let x_t = seeded_noise(1, self.dm.config().data_dim, seed);
        let images = experiments::traverse(&chain, &self.models.block, k, grid, &x_t).map_err(py_err)?;
        Ok(images.iter().map(|t| t.to_f64_vec()).collect())
    }

    /// Inverts `image` and regenerates it with `(k, s)` edits applied.
    fn edit(&self, image: Vec<f64>, edits: Vec<(usize, f64)>) -> PyResult<Vec<f64>> {
        let chain = discovery_chain(&self.dm, &self.sched, &self.cfg).map_err(py_err)?;
        let x0 = Tensor::<f32>::from_f64(&[1, image.len()], &image).map_err(py_err)?;
        Ok(invert_and_edit(&chain, &self.models.block, &x0, &edits).map_err(py_err)?.to_f64_vec())
    }

    /// Reconstructor accuracy over `pairs` generated pairs.
    #[pyo3(signature = (pairs = 1000, seed = 0))]
    fn rca(&self, pairs: usize, seed: u64) -> PyResult<f64> {
        let chain = discovery_chain(&self.dm, &self.sched, &self.cfg).map_err(py_err)?;
        rca_eval(&chain, &self.models.block, &self.models.recon, pairs, seed).map_err(py_err)
    }
}

/// `n` toy disc images and their `(centre_x, centre_y, radius, intensity)`.
#[pyfunction]
fn toy_dataset(n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<[f64; 4]>)> {
    let d = make_dataset(n, seed).map_err(py_err)?;
    let images = d.images.data().chunks(d.images.shape()[1]).map(|c| c.to_vec()).collect();
    Ok((images, d.factors.iter().map(|f| f.to_array()).collect()))
}

/// Factor estimates `(centre_x, centre_y, radius, intensity)` for one image.
#[pyfunction]
fn estimate(image: Vec<f64>) -> PyResult<[f64; 4]> {
    if image.len() != 256 {
        return Err(PyValueError::new_err(format!("expected 256 pixels, got {}", image.len())));
    }
    Ok(estimate_factors(&image).to_array())
}

/// Largest relative gradient difference between node-by-node and
/// full-graph backprop on a small random float64 chain.
#[pyfunction]
#[pyo3(signature = (sample_steps, seed = 0))]
fn gradient_check(sample_steps: usize, seed: u64) -> PyResult<f64> {
    Ok(experiments::check_gradients(sample_steps, seed, None).map_err(py_err)?.max_rel_err)
}

#[pymodule]
fn hdir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySettings>()?;
    m.add_class::<PyDiffusionModel>()?;
    m.add_class::<PyDirections>()?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
