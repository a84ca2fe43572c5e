//! Python bindings: loss terms, matching, geometry, the model and the
//! end-to-end pipeline entry points.

use std::path::PathBuf;

use ndarray::{Array2, Array3, Array4, Axis};
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3, PyReadonlyArray4,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vicregl::data::{gen_shapes as core_gen_shapes, load_dataset, ShapesConfig};
use vicregl::eval::miou as core_miou;
use vicregl::geometry::{position_grid as core_position_grid, CropRect, PositionGrid};
use vicregl::losses::{self, LossBreakdown, LossConfig, VicregWeights, ViewBatch};
use vicregl::matching::{self, Match, MatchSet};
use vicregl::model;
use vicregl::nn::Mode;
use vicregl::trainer::{self, TrainConfig};
use vicregl::verify::{self, SuiteConfig};

fn to_py(e: vicregl::Error) -> PyErr {
    match e {
        vicregl::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn breakdown_dict<'py>(py: Python<'py>, b: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total", b.total)?;
    d.set_item("global_vicreg", b.global_vicreg)?;
    d.set_item("invariance", b.invariance)?;
    d.set_item("variance", b.variance)?;
    d.set_item("covariance", b.covariance)?;
    d.set_item("local_location", b.local_location)?;
    d.set_item("local_feature", b.local_feature)?;
    d.set_item("alpha", b.alpha)?;
    Ok(d)
}

/// Crop geometry of one view in seed-image pixels.
#[pyclass(name = "CropRect", from_py_object)]
#[derive(Clone)]
pub struct PyCropRect {
    inner: CropRect,
}

#[pymethods]
impl PyCropRect {
    #[new]
    #[pyo3(signature = (x0, y0, crop_w, crop_h, out_h, out_w, hflip=false))]
    fn new(x0: f64, y0: f64, crop_w: f64, crop_h: f64, out_h: usize, out_w: usize, hflip: bool) -> Self {
        Self {
            inner: CropRect {
                x0,
                y0,
                crop_w,
                crop_h,
                hflip,
                out_h,
                out_w,
            },
        }
    }

    #[getter]
    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "CropRect(x0={}, y0={}, crop_w={}, crop_h={}, out_h={}, out_w={}, hflip={})",
            c.x0, c.y0, c.crop_w, c.crop_h, c.out_h, c.out_w, c.hflip
        )
    }
}

/// Absolute seed-image coordinates of every feature-map cell.
#[pyclass(name = "PositionGrid", from_py_object)]
#[derive(Clone)]
pub struct PyPositionGrid {
    inner: PositionGrid,
}

#[pymethods]
impl PyPositionGrid {
    #[getter]
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    /// `H x W x 2` array of `(row, col)` coordinates.
    fn coords<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f64>> {
        self.inner.coords().into_pyarray(py)
    }

    fn at(&self, i: usize, j: usize) -> PyResult<(f64, f64)> {
        let (h, w) = self.inner.dims();
        if i >= h || j >= w {
            return Err(PyValueError::new_err(format!("cell ({i}, {j}) outside {h}x{w} grid")));
        }
        Ok(self.inner.at(i, j))
    }
}

#[pyfunction]
fn position_grid(crop: &PyCropRect, map_h: usize, map_w: usize) -> PyResult<PyPositionGrid> {
    Ok(PyPositionGrid {
        inner: core_position_grid(&crop.inner, (map_h, map_w)).map_err(to_py)?,
    })
}

type PyMatch = ((usize, usize), (usize, usize), f64);

fn matches_to_py(m: &MatchSet) -> Vec<PyMatch> {
    m.pairs.iter().map(|p| (p.src, p.dst, p.dist)).collect()
}

fn matches_from_py(pairs: Vec<PyMatch>) -> MatchSet {
    MatchSet {
        pairs: pairs
            .into_iter()
            .map(|(src, dst, dist)| Match { src, dst, dist })
            .collect(),
        src_view: 0,
        dst_view: 1,
    }
}

/// Spatial nearest neighbor in `grid_b` of every cell of `grid_a`, as
/// `((i, j), (k, l), distance)` tuples in row-major order of the source.
#[pyfunction]
fn location_match(grid_a: &PyPositionGrid, grid_b: &PyPositionGrid) -> PyResult<Vec<PyMatch>> {
    Ok(matches_to_py(
        &matching::location_match(&grid_a.inner, &grid_b.inner).map_err(to_py)?,
    ))
}

/// Nearest neighbor in embedding space between two `D x H x W` maps.
#[pyfunction]
fn feature_match(za: PyReadonlyArray3<f64>, zb: PyReadonlyArray3<f64>) -> PyResult<Vec<PyMatch>> {
    Ok(matches_to_py(
        &matching::feature_match(za.as_array(), zb.as_array()).map_err(to_py)?,
    ))
}

/// The `gamma` pairs with the smallest distance.
#[pyfunction]
fn top_gamma(matches: Vec<PyMatch>, gamma: usize) -> PyResult<Vec<PyMatch>> {
    Ok(matches_to_py(
        &matching::top_gamma(&matches_from_py(matches), gamma).map_err(to_py)?,
    ))
}

/// VICReg criterion of two `N x D` batches.
#[pyfunction]
#[pyo3(signature = (z1, z2, lambda_inv=25.0, mu_var=25.0, nu_cov=1.0))]
fn vicreg_loss<'py>(
    py: Python<'py>,
    z1: PyReadonlyArray2<f64>,
    z2: PyReadonlyArray2<f64>,
    lambda_inv: f64,
    mu_var: f64,
    nu_cov: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let w = VicregWeights::new(lambda_inv, mu_var, nu_cov);
    let b = losses::vicreg_loss(z1.as_array(), z2.as_array(), &w).map_err(to_py)?;
    breakdown_dict(py, &b)
}

/// Value and gradients of the VICReg criterion.
#[pyfunction]
#[pyo3(signature = (z1, z2, lambda_inv=25.0, mu_var=25.0, nu_cov=1.0))]
#[allow(clippy::type_complexity)]
fn vicreg_grad<'py>(
    py: Python<'py>,
    z1: PyReadonlyArray2<f64>,
    z2: PyReadonlyArray2<f64>,
    lambda_inv: f64,
    mu_var: f64,
    nu_cov: f64,
) -> PyResult<(f64, Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>)> {
    let w = VicregWeights::new(lambda_inv, mu_var, nu_cov);
    let (terms, g1, g2) = losses::vicreg_grad(z1.as_array(), z2.as_array(), &w).map_err(to_py)?;
    Ok((terms.value, g1.into_pyarray(py), g2.into_pyarray(py)))
}

#[pyfunction]
fn variance_term(z: PyReadonlyArray2<f64>) -> PyResult<f64> {
    losses::variance_term(z.as_array(), losses::VARIANCE_EPS).map_err(to_py)
}

#[pyfunction]
fn covariance_term(z: PyReadonlyArray2<f64>) -> PyResult<f64> {
    losses::covariance_term(z.as_array()).map_err(to_py)
}

#[pyfunction]
fn invariance_term(z1: PyReadonlyArray2<f64>, z2: PyReadonlyArray2<f64>) -> PyResult<f64> {
    losses::invariance_term(z1.as_array(), z2.as_array()).map_err(to_py)
}

/// Combined global and local criterion of two views. `maps_*` are
/// `B x D x H x W`, `global_*` are `B x D'` and `grids_*` hold one grid per image.
#[pyfunction]
#[pyo3(signature = (maps_a, maps_b, global_a, global_b, grids_a, grids_b, alpha=0.75, gamma=20))]
#[allow(clippy::too_many_arguments)]
fn two_view_loss<'py>(
    py: Python<'py>,
    maps_a: PyReadonlyArray4<f64>,
    maps_b: PyReadonlyArray4<f64>,
    global_a: PyReadonlyArray2<f64>,
    global_b: PyReadonlyArray2<f64>,
    grids_a: Vec<PyPositionGrid>,
    grids_b: Vec<PyPositionGrid>,
    alpha: f64,
    gamma: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = LossConfig {
        alpha,
        gamma_large: gamma,
        ..LossConfig::default()
    };
    let ga: Vec<PositionGrid> = grids_a.into_iter().map(|g| g.inner).collect();
    let gb: Vec<PositionGrid> = grids_b.into_iter().map(|g| g.inner).collect();
    let a = ViewBatch {
        maps: maps_a.as_array(),
        global: global_a.as_array(),
        grids: &ga,
        is_large: true,
    };
    let b = ViewBatch {
        maps: maps_b.as_array(),
        global: global_b.as_array(),
        grids: &gb,
        is_large: true,
    };
    let out = losses::total_loss_two_view(&a, &b, &cfg).map_err(to_py)?;
    let d = breakdown_dict(py, &out.breakdown)?;
    let [g0, g1]: [losses::ViewGrads; 2] = out.grads.try_into().expect("two views in, two gradients out");
    d.set_item("grad_maps_a", g0.maps.into_pyarray(py))?;
    d.set_item("grad_maps_b", g1.maps.into_pyarray(py))?;
    d.set_item("grad_global_a", g0.global.into_pyarray(py))?;
    d.set_item("grad_global_b", g1.global.into_pyarray(py))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, warmup_steps, base_lr, final_lr=0.0))]
fn cosine_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, final_lr: f64) -> f64 {
    trainer::cosine_schedule(step, total_steps, warmup_steps, base_lr, final_lr)
}

/// Synthetic shapes: `(images N x 3 x S x S, masks N x S x S, labels N)`.
#[pyfunction]
#[pyo3(signature = (n, size=64, seed=0))]
#[allow(clippy::type_complexity)]
fn gen_shapes<'py>(
    py: Python<'py>,
    n: usize,
    size: usize,
    seed: u64,
) -> PyResult<(
    Bound<'py, PyArray4<f64>>,
    Bound<'py, PyArray3<u8>>,
    Bound<'py, PyArray1<u32>>,
)> {
    let cfg = ShapesConfig::for_canvas(size, seed);
    let samples = core_gen_shapes(&cfg, n).map_err(to_py)?;
    let mut images = Array4::zeros((n, 3, size, size));
    let mut masks = Array3::zeros((n, size, size));
    for (i, s) in samples.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&s.pixels);
        if let Some(m) = &s.mask {
            masks.index_axis_mut(Axis(0), i).assign(m);
        }
    }
    let labels: Vec<u32> = samples.iter().map(|s| s.label.unwrap_or(0)).collect();
    Ok((images.into_pyarray(py), masks.into_pyarray(py), labels.into_pyarray(py)))
}

/// Writes a shapes dataset file and returns the number of samples.
#[pyfunction]
#[pyo3(signature = (path, n, size=64, seed=0))]
fn write_shapes(path: PathBuf, n: usize, size: usize, seed: u64) -> PyResult<usize> {
    let cfg = ShapesConfig::for_canvas(size, seed);
    Ok(vicregl::data::write_shapes(&cfg, n, &path).map_err(to_py)?.len())
}

/// Mean IoU of `N x H x W` label maps.
#[pyfunction]
fn miou(pred: PyReadonlyArray3<u8>, gt: PyReadonlyArray3<u8>, num_classes: usize) -> PyResult<f64> {
    let split = |a: ndarray::ArrayView3<u8>| -> Vec<Array2<u8>> { a.outer_iter().map(|m| m.to_owned()).collect() };
    core_miou(&split(pred.as_array()), &split(gt.as_array()), num_classes).map_err(to_py)
}

/// Default pretraining configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_toml()
}

/// Encoder with local projector and global expander.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a TOML run configuration (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => TrainConfig::from_toml(text).map_err(to_py)?,
            None => TrainConfig::default(),
        };
        cfg.seed = seed;
        Ok(Self {
            inner: model::Model::new(&cfg.model_config()).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _, _) = trainer::load_model(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Encoder feature map of a `B x 3 x H x W` batch.
    fn encode<'py>(&mut self, py: Python<'py>, x: PyReadonlyArray4<f64>) -> PyResult<Bound<'py, PyArray4<f64>>> {
        Ok(self
            .inner
            .encode(x.as_array(), Mode::Eval)
            .map_err(to_py)?
            .into_pyarray(py))
    }

    /// `(local maps B x D x h x w, global embeddings B x D')` in evaluation mode.
    #[allow(clippy::type_complexity)]
    fn forward<'py>(
        &mut self,
        py: Python<'py>,
        x: PyReadonlyArray4<f64>,
    ) -> PyResult<(Bound<'py, PyArray4<f64>>, Bound<'py, PyArray2<f64>>)> {
        let f = self.inner.forward_view(x.as_array(), Mode::Eval).map_err(to_py)?;
        Ok((f.maps.into_pyarray(py), f.global.into_pyarray(py)))
    }

    fn checksum(&mut self) -> u64 {
        self.inner.checksum()
    }

    #[getter]
    fn num_params(&mut self) -> usize {
        self.inner.num_params()
    }
}

/// Pretrains on a dataset file and returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, data, out_dir, resume=false))]
fn pretrain(py: Python<'_>, config: &str, data: PathBuf, out_dir: PathBuf, resume: bool) -> PyResult<String> {
    let cfg = TrainConfig::from_toml(config).map_err(to_py)?;
    let ds = load_dataset(&data).map_err(to_py)?;
    let out = py
        .detach(|| trainer::pretrain(&cfg, &ds, &out_dir, resume))
        .map_err(to_py)?;
    Ok(out.checkpoint.display().to_string())
}

/// Runs the verification suite; returns `(passed, report text)`.
#[pyfunction]
#[pyo3(signature = (groups=None, seed=0, fault=None))]
fn run_verify(
    py: Python<'_>,
    groups: Option<Vec<String>>,
    seed: u64,
    fault: Option<String>,
) -> PyResult<(bool, String)> {
    let groups = groups
        .unwrap_or_default()
        .iter()
        .map(|g| g.parse::<verify::Group>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let fault = fault.map(|f| f.parse::<verify::Fault>()).transpose().map_err(to_py)?;
    let cfg = SuiteConfig {
        seed,
        groups,
        fault,
        ..SuiteConfig::default()
    };
    let report = py.detach(|| verify::run_suite(&cfg));
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn pyvicregl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCropRect>()?;
    m.add_class::<PyPositionGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(position_grid, m)?)?;
    m.add_function(wrap_pyfunction!(location_match, m)?)?;
    m.add_function(wrap_pyfunction!(feature_match, m)?)?;
    m.add_function(wrap_pyfunction!(top_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(vicreg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(vicreg_grad, m)?)?;
    m.add_function(wrap_pyfunction!(variance_term, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_term, m)?)?;
    m.add_function(wrap_pyfunction!(invariance_term, m)?)?;
    m.add_function(wrap_pyfunction!(two_view_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(gen_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(write_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
