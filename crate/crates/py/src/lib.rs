//! Python bindings. Arrays cross the boundary as flat row-major lists of
//! floats with an explicit shape; wrap them with `numpy.reshape` as needed.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pgc_core::density::{self, SceneConfig};
use pgc_core::io;
use pgc_core::pgc_net::{self, NetworkConfig, TrainSample, TrainerConfig};
use pgc_core::{DictionaryConfig, Map2, NormalizationMode, PaddingMode, PerspectiveParams, PgcError, Tensor};

fn py_err(e: PgcError) -> PyErr {
    match e {
        PgcError::InvalidArgument(_) | PgcError::ShapeMismatch(_) => PyValueError::new_err(e.to_string()),
        PgcError::Io(_) | PgcError::Format(_) | PgcError::Json(_) => PyIOError::new_err(e.to_string()),
        PgcError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for pgc_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn padding(name: &str) -> PyResult<PaddingMode> {
    match name {
        "replicate" => Ok(PaddingMode::Replicate),
        "zero" => Ok(PaddingMode::Zero),
        _ => Err(PyValueError::new_err(format!("padding must be 'replicate' or 'zero', got {name:?}"))),
    }
}

fn normalization(name: &str) -> PyResult<NormalizationMode> {
    match name {
        "unit_sum" => Ok(NormalizationMode::UnitSum),
        "analytic1d" => Ok(NormalizationMode::Analytic1d),
        _ => Err(PyValueError::new_err(format!("normalization must be 'unit_sum' or 'analytic1d', got {name:?}"))),
    }
}

fn map2(values: Vec<f64>, height: usize, width: usize) -> PyResult<Map2> {
    if values.len() != height * width {
        return Err(PyValueError::new_err(format!("expected {height}x{width} = {} values, got {}", height * width, values.len())));
    }
    Map2::from_vec(height, width, values).py()
}

fn tensor(values: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::from_vec(shape.0, shape.1, shape.2, values).py()
}

/// Low-rank Gaussian kernel dictionary.
#[pyclass(name = "Dictionary", module = "pgc_py", frozen)]
pub struct Dictionary {
    inner: pgc_core::KernelDictionary,
}

#[pymethods]
impl Dictionary {
    #[new]
    #[pyo3(signature = (kernel_size=None, sigma_min=None, sigma_max=None, sigma_step=None, components=None, energy_threshold=None, normalization="unit_sum"))]
    fn new(
        kernel_size: Option<usize>,
        sigma_min: Option<f64>,
        sigma_max: Option<f64>,
        sigma_step: Option<f64>,
        components: Option<usize>,
        energy_threshold: Option<f64>,
        normalization: &str,
    ) -> PyResult<Self> {
        let d = DictionaryConfig::default();
        let cfg = DictionaryConfig {
            kernel_size: kernel_size.unwrap_or(d.kernel_size),
            sigma_min: sigma_min.unwrap_or(d.sigma_min),
            sigma_max: sigma_max.unwrap_or(d.sigma_max),
            sigma_step: sigma_step.unwrap_or(d.sigma_step),
            mode: self::normalization(normalization)?,
            energy_threshold: energy_threshold.unwrap_or(d.energy_threshold),
            components,
        };
        Ok(Self { inner: pgc_core::build_dictionary(&cfg).py()? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::load_dictionary(&dir).py()? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        io::save_dictionary(&dir, &self.inner).py().map(drop)
    }

    #[getter]
    fn kernel_size(&self) -> usize {
        self.inner.kernel_size()
    }

    #[getter]
    fn retained(&self) -> usize {
        self.inner.retained
    }

    #[getter]
    fn energy_ratio(&self) -> f64 {
        self.inner.energy_ratio
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.singular_values.clone()
    }

    #[getter]
    fn sigma_grid(&self) -> Vec<f64> {
        self.inner.sigma_grid.clone()
    }

    /// One flattened `K × K` kernel per retained component.
    #[getter]
    fn eigen_kernels(&self) -> Vec<Vec<f32>> {
        (0..self.inner.retained).map(|q| self.inner.eigen_kernel(q).to_vec()).collect()
    }

    fn energy_preserved(&self, components: usize) -> PyResult<f64> {
        self.inner.energy_preserved(components).py()
    }

    fn coefficients(&self, sigma: f64) -> Vec<f64> {
        self.inner.coefficients(sigma)
    }

    fn reconstruct_kernel(&self, sigma: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.reconstruct_kernel(sigma).py()?.weights)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dictionary(kernel_size={}, retained={}, energy_ratio={:.6})",
            self.inner.kernel_size(),
            self.inner.retained,
            self.inner.energy_ratio
        )
    }
}

/// Per-pixel Gaussian filtering of a `C × H × W` input.
#[pyfunction]
#[pyo3(signature = (x, shape, sigma, kernel_size=7, padding="replicate", normalization="unit_sum"))]
fn filter_exact(
    x: Vec<f32>,
    shape: (usize, usize, usize),
    sigma: Vec<f64>,
    kernel_size: usize,
    padding: &str,
    normalization: &str,
) -> PyResult<Vec<f32>> {
    let x = tensor(x, shape)?;
    let sigma = map2(sigma, shape.1, shape.2)?;
    let y = pgc_core::filter_exact(&x, &sigma, kernel_size, self::normalization(normalization)?, self::padding(padding)?).py()?;
    Ok(y.into_vec())
}

/// Low-rank approximation of [`filter_exact`] through a dictionary.
#[pyfunction]
#[pyo3(signature = (x, shape, sigma, dictionary, padding="replicate"))]
fn filter_approx(
    x: Vec<f32>,
    shape: (usize, usize, usize),
    sigma: Vec<f64>,
    dictionary: &Dictionary,
    padding: &str,
) -> PyResult<Vec<f32>> {
    let x = tensor(x, shape)?;
    let sigma = map2(sigma, shape.1, shape.2)?;
    Ok(pgc_core::filter_approx(&x, &sigma, &dictionary.inner, self::padding(padding)?).py()?.into_vec())
}

#[pyfunction]
fn normalize_perspective(p: Vec<f64>, height: usize, width: usize, alpha: f64, beta: f64) -> PyResult<Vec<f64>> {
    let params = PerspectiveParams { alpha, beta, ..Default::default() };
    Ok(pgc_core::normalize_perspective(&map2(p, height, width)?, &params).values)
}

#[pyfunction]
fn blur_from_perspective(p_norm: Vec<f64>, height: usize, width: usize, a: f64, p0: f64) -> PyResult<Vec<f64>> {
    let params = PerspectiveParams { a, p0, ..Default::default() };
    Ok(pgc_core::blur_from_perspective(&map2(p_norm, height, width)?, &params).values)
}

#[pyfunction]
fn row_mean_collapse(p: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    Ok(pgc_core::row_mean_collapse(&map2(p, height, width)?).values)
}

#[pyfunction]
fn mae_mse(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<(f64, f64)> {
    density::mae_mse(&pred, &gt).py()
}

/// A synthetic or loaded crowd scene.
#[pyclass(name = "Scene", module = "pgc_py", frozen)]
pub struct Scene {
    inner: density::Scene,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    #[pyo3(signature = (height=32, width=32, heads=20, seed=0, noise=None))]
    fn synth(height: usize, width: usize, heads: usize, seed: u64, noise: Option<f64>) -> PyResult<Self> {
        let mut cfg = SceneConfig::new(height, width, heads, seed);
        if let Some(n) = noise {
            cfg.background_noise = n;
        }
        Ok(Self { inner: density::synth_scene(&cfg).py()? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::load_scene(&dir).py()? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        io::save_scene(&dir, &self.inner).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.gt_density.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.gt_density.width
    }

    /// `3 × H × W`.
    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.data().to_vec()
    }

    #[getter]
    fn density(&self) -> Vec<f64> {
        self.inner.gt_density.values.clone()
    }

    #[getter]
    fn perspective(&self) -> Vec<f64> {
        self.inner.gt_perspective.values.clone()
    }

    /// Head positions as `(x, y)` in pixel coordinates.
    #[getter]
    fn dots(&self) -> Vec<(f64, f64)> {
        self.inner.dots.iter().map(|d| (d.x, d.y)).collect()
    }

    #[getter]
    fn count(&self) -> f64 {
        self.inner.gt_count()
    }

    fn density_sum(&self) -> PyResult<f64> {
        density::count(&self.inner.gt_density, self.inner.roi.as_ref()).py()
    }

    fn __repr__(&self) -> String {
        format!("Scene({}x{}, count={})", self.height(), self.width(), self.inner.gt_count())
    }
}

#[pyfunction]
fn save_scene_set(dir: PathBuf, scenes: Vec<PyRef<'_, Scene>>) -> PyResult<()> {
    let owned: Vec<density::Scene> = scenes.iter().map(|s| s.inner.clone()).collect();
    io::save_scene_set(&dir, &owned).py().map(drop)
}

#[pyfunction]
fn load_scene_set(dir: PathBuf) -> PyResult<Vec<Scene>> {
    Ok(io::load_scene_set(&dir).py()?.into_iter().map(|inner| Scene { inner }).collect())
}

fn samples(scenes: &[PyRef<'_, Scene>]) -> PyResult<Vec<TrainSample>> {
    scenes.iter().map(|s| TrainSample::from_scene(&s.inner).py()).collect()
}

/// Density network with perspective-guided blocks.
#[pyclass(name = "Network", module = "pgc_py")]
pub struct Network {
    inner: pgc_net::Network,
    seed: u64,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (blocks=3, backbone=None, out_channels=4, smoothing=true, seed=0))]
    fn new(blocks: usize, backbone: Option<Vec<usize>>, out_channels: usize, smoothing: bool, seed: u64) -> PyResult<Self> {
        let d = NetworkConfig::default();
        let cfg = NetworkConfig {
            backbone_channels: backbone.unwrap_or(d.backbone_channels.clone()),
            num_pgc_blocks: blocks,
            block_out_channels: out_channels,
            smoothing,
            ..d
        };
        Ok(Self { inner: pgc_net::build_toy_net(&cfg, seed).py()?, seed })
    }

    /// Restores a `pgc_net` checkpoint directory written by `save` or `pgc train`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (manifest, groups) = io::load_checkpoint(&dir).py()?;
        if manifest.kind != "pgc_net" {
            return Err(PyValueError::new_err(format!("{}: not a density-network checkpoint", dir.display())));
        }
        let cfg: NetworkConfig = serde_json::from_value(manifest.config["network"].clone())
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut inner = pgc_net::build_toy_net(&cfg, manifest.seed).py()?;
        inner.load_groups(&groups).py()?;
        Ok(Self { inner, seed: manifest.seed })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let config = serde_json::json!({ "network": self.inner.config });
        io::save_checkpoint(&dir, "pgc_net", config, self.seed, 0, None, &self.inner.named_groups())
            .py()
            .map(drop)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Per-block `(alpha, beta, a, p0)`.
    #[getter]
    fn perspective_params(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner
            .blocks
            .iter()
            .map(|b| {
                let [al, be, a, p0] = b.perspective.to_array();
                (al, be, a, p0)
            })
            .collect()
    }

    /// Sets every block's sigmoid to the range of the scenes' perspective maps.
    fn init_perspective(&mut self, scenes: Vec<PyRef<'_, Scene>>) {
        let observed: Vec<f64> = scenes.iter().flat_map(|s| s.inner.gt_perspective.values.iter().copied()).collect();
        self.inner.init_perspective(&observed);
    }

    /// Density map at feature resolution, flattened, with its height and width.
    fn predict(&self, scene: PyRef<'_, Scene>) -> PyResult<(Vec<f64>, usize, usize)> {
        let s = TrainSample::from_scene(&scene.inner).py()?;
        let d = self.inner.forward(&s.image, &s.perspective).py()?;
        Ok((d.values, d.height, d.width))
    }

    fn predict_count(&self, scene: PyRef<'_, Scene>) -> PyResult<f64> {
        Ok(self.predict(scene)?.0.iter().sum())
    }

    /// Trains in place; returns the per-epoch mean loss.
    #[pyo3(signature = (scenes, epochs=20, learning_rate=None, momentum=None, weight_decay=None, seed=None))]
    fn train(
        &mut self,
        py: Python<'_>,
        scenes: Vec<PyRef<'_, Scene>>,
        epochs: usize,
        learning_rate: Option<f64>,
        momentum: Option<f64>,
        weight_decay: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<Vec<f64>> {
        let d = TrainerConfig::default();
        let tcfg = TrainerConfig {
            learning_rate: learning_rate.unwrap_or(d.learning_rate),
            momentum: momentum.unwrap_or(d.momentum),
            weight_decay: weight_decay.unwrap_or(d.weight_decay),
            epochs,
            seed: seed.unwrap_or(self.seed),
        };
        let samples = samples(&scenes)?;
        let net = &self.inner;
        let (trained, curve) = py.detach(|| pgc_net::train_samples(net, &samples, &tcfg)).py()?;
        self.inner = trained;
        Ok(curve)
    }

    fn evaluate<'py>(&self, py: Python<'py>, scenes: Vec<PyRef<'_, Scene>>) -> PyResult<Bound<'py, PyDict>> {
        let r = pgc_net::evaluate(&self.inner, &samples(&scenes)?).py()?;
        let d = PyDict::new(py);
        d.set_item("mae", r.mae)?;
        d.set_item("mse", r.mse)?;
        d.set_item("mean_loss", r.mean_loss)?;
        d.set_item("predicted", r.predicted)?;
        d.set_item("ground_truth", r.ground_truth)?;
        Ok(d)
    }

    #[pyo3(signature = (scene, step=1e-4, tolerance=1e-4))]
    fn gradcheck<'py>(&self, py: Python<'py>, scene: PyRef<'_, Scene>, step: f64, tolerance: f64) -> PyResult<Bound<'py, PyDict>> {
        let s = TrainSample::from_scene(&scene.inner).py()?;
        let r = pgc_net::gradcheck(&self.inner, &s, step, tolerance).py()?;
        let d = PyDict::new(py);
        d.set_item("checked", r.checked)?;
        d.set_item("kink_adjacent", r.kink_adjacent)?;
        d.set_item("max_rel_error", r.max_rel_error)?;
        d.set_item("mean_rel_error", r.mean_rel_error)?;
        d.set_item("pass", r.pass)?;
        Ok(d)
    }
}

#[pymodule]
fn pgc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dictionary>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(filter_exact, m)?)?;
    m.add_function(wrap_pyfunction!(filter_approx, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_perspective, m)?)?;
    m.add_function(wrap_pyfunction!(blur_from_perspective, m)?)?;
    m.add_function(wrap_pyfunction!(row_mean_collapse, m)?)?;
    m.add_function(wrap_pyfunction!(mae_mse, m)?)?;
    m.add_function(wrap_pyfunction!(save_scene_set, m)?)?;
    m.add_function(wrap_pyfunction!(load_scene_set, m)?)?;
    Ok(())
}
