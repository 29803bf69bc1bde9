//! Python bindings for `pdk_core`.
//!
//! Rasters cross the boundary as flat row-major lists plus `(height, width)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pdk_core::depth::{self, DepthTriplet};
use pdk_core::io::{self, DepthEncoding};
use pdk_core::metrics::{self, DPQResult, PQStats};
use pdk_core::synth::{self, PerturbConfig, SceneSpec};
use pdk_core::{losses, Error, Raster2D, SegmentRef};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Panoptic label map; labels are `class << 16 | instance`, `0xFFFF0000` is VOID.
#[pyclass(name = "PanopticMap", module = "pdk", frozen)]
struct PyPanopticMap(pdk_core::PanopticLabelMap);

#[pymethods]
impl PyPanopticMap {
    /// Segments with instance id 0 are stuff, all others things.
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u32>) -> PyResult<Self> {
        let raster = Raster2D::new(height, width, labels.into_iter().map(SegmentRef).collect()).map_err(to_py)?;
        Ok(Self(pdk_core::PanopticLabelMap::from_labels(raster)))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_panoptic(path).map(Self).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_panoptic(path, &self.0).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels().values().iter().map(|l| l.0).collect()
    }

    /// `(label, is_thing)` pairs.
    #[getter]
    fn segments(&self) -> Vec<(u32, bool)> {
        self.0.segments().iter().map(|s| (s.id.0, s.is_thing)).collect()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.dims();
        format!("PanopticMap({h}x{w}, {} segments)", self.0.segments().len())
    }
}

/// Metric depth with a validity mask; non-positive or non-finite values are invalid.
#[pyclass(name = "DepthMap", module = "pdk", frozen)]
struct PyDepthMap(pdk_core::DepthMap);

#[pymethods]
impl PyDepthMap {
    #[new]
    fn new(height: usize, width: usize, depth: Vec<f64>) -> PyResult<Self> {
        let raster = Raster2D::new(height, width, depth).map_err(to_py)?;
        Ok(Self(pdk_core::DepthMap::from_depth(raster)))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_depth(path).map(Self).map_err(to_py)
    }

    /// `encoding` is `"f64"` or `"u16"` (1/256 m).
    #[pyo3(signature = (path, encoding = "f64"))]
    fn write(&self, path: PathBuf, encoding: &str) -> PyResult<()> {
        let enc = match encoding {
            "f64" => DepthEncoding::F64,
            "u16" => DepthEncoding::U16,
            other => return Err(PyValueError::new_err(format!("unknown encoding {other:?}"))),
        };
        io::write_depth(path, &self.0, enc).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.dims()
    }

    /// Depth values with invalid pixels as `None`.
    #[getter]
    fn values(&self) -> Vec<Option<f64>> {
        (0..self.0.depth().len()).map(|p| self.0.at(p)).collect()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.dims();
        format!("DepthMap({h}x{w}, {} valid)", self.0.valid_count())
    }
}

fn pq_dict<'py>(py: Python<'py>, stats: &PQStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("pq", stats.pq())?;
    d.set_item("pq_thing", stats.pq_thing())?;
    d.set_item("pq_stuff", stats.pq_stuff())?;
    let cats = PyDict::new(py);
    for (class, c) in &stats.categories {
        let e = PyDict::new(py);
        e.set_item("is_thing", c.is_thing)?;
        e.set_item("tp", c.tp)?;
        e.set_item("fp", c.fp)?;
        e.set_item("fn", c.fn_)?;
        e.set_item("iou_sum", c.iou_sum)?;
        e.set_item("pq", c.pq())?;
        cats.set_item(class, e)?;
    }
    d.set_item("categories", cats)?;
    Ok(d)
}

fn dpq_dict<'py>(py: Python<'py>, r: &DPQResult) -> PyResult<Bound<'py, PyDict>> {
    let d = pq_dict(py, &r.pq_stats)?;
    d.set_item("dpq", r.dpq())?;
    d.set_item("dpq_thing", r.dpq_thing())?;
    d.set_item("dpq_stuff", r.dpq_stuff())?;
    let per: Vec<(f64, f64)> = r.per_lambda.iter().map(|l| (l.lambda, l.stats.pq())).collect();
    d.set_item("per_lambda", per)?;
    Ok(d)
}

#[pyfunction]
fn compute_pq<'py>(py: Python<'py>, pred: &PyPanopticMap, gt: &PyPanopticMap) -> PyResult<Bound<'py, PyDict>> {
    let stats = metrics::compute_pq(&pred.0, &gt.0).map_err(to_py)?;
    pq_dict(py, &stats)
}

#[pyfunction]
#[pyo3(signature = (pred_panoptic, pred_depth, gt_panoptic, gt_depth, lambdas = metrics::DEFAULT_LAMBDAS.to_vec()))]
fn compute_dpq<'py>(
    py: Python<'py>,
    pred_panoptic: &PyPanopticMap,
    pred_depth: &PyDepthMap,
    gt_panoptic: &PyPanopticMap,
    gt_depth: &PyDepthMap,
    lambdas: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::compute_dpq(&pred_panoptic.0, &pred_depth.0, &gt_panoptic.0, &gt_depth.0, &lambdas)
        .map_err(to_py)?;
    dpq_dict(py, &r)
}

#[pyfunction]
fn compute_rmse(pred: &PyDepthMap, gt: &PyDepthMap) -> PyResult<f64> {
    metrics::compute_rmse(&pred.0, &gt.0).map_err(to_py)
}

/// Returns `(silog_var, rse, total)`.
#[pyfunction]
fn silog_rse_loss(d: Vec<f64>, d_hat: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let l = losses::silog_rse_loss(&d, &d_hat).map_err(to_py)?;
    Ok((l.silog_var, l.rse, l.total))
}

#[pyfunction]
fn silog_rse_grad(d: Vec<f64>, d_hat: Vec<f64>) -> PyResult<Vec<f64>> {
    losses::silog_rse_grad(&d, &d_hat).map_err(to_py)
}

/// Normalized depth in `[0, 1]` to meters with the `"t1"` or `"t2"` rule.
#[pyfunction]
#[pyo3(signature = (scheme, normalized, range, shift, d_max = depth::DEFAULT_D_MAX))]
fn unnormalize(scheme: &str, normalized: Vec<f64>, range: f64, shift: f64, d_max: f64) -> PyResult<Vec<f64>> {
    let n = normalized.len();
    let raster = Raster2D::new(1, n, normalized).map_err(to_py)?;
    let t = DepthTriplet::new(raster, range, shift).map_err(to_py)?;
    let out = match scheme {
        "t1" => depth::unnormalize_t1(&t, d_max),
        "t2" => depth::unnormalize_t2(&t, d_max),
        other => return Err(PyValueError::new_err(format!("unknown scheme {other:?}"))),
    };
    Ok(out.map_err(to_py)?.into_values())
}

#[pyfunction]
#[pyo3(signature = (seed, height, width, step_depth = false, n_void = 0))]
fn generate_scene(
    seed: u64,
    height: usize,
    width: usize,
    step_depth: bool,
    n_void: usize,
) -> PyResult<(PyPanopticMap, PyDepthMap)> {
    let base = if step_depth {
        SceneSpec::step_depth(seed, height, width)
    } else {
        SceneSpec::new(seed, height, width)
    };
    let scene = synth::generate_scene(&SceneSpec { n_void, ..base }).map_err(to_py)?;
    Ok((PyPanopticMap(scene.panoptic), PyDepthMap(scene.depth)))
}

#[pyfunction]
#[pyo3(signature = (panoptic, depth, depth_ratio = 1.0, erode = 0, depth_noise = 0.0, seed = 0))]
fn perturb_prediction(
    panoptic: &PyPanopticMap,
    depth: &PyDepthMap,
    depth_ratio: f64,
    erode: usize,
    depth_noise: f64,
    seed: u64,
) -> PyResult<(PyPanopticMap, PyDepthMap)> {
    let cfg = PerturbConfig {
        depth_ratio,
        erode,
        depth_noise,
        seed,
    };
    let (p, d) = synth::perturb_prediction(&panoptic.0, &depth.0, &cfg).map_err(to_py)?;
    Ok((PyPanopticMap(p), PyDepthMap(d)))
}

#[pymodule]
fn pdk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanopticMap>()?;
    m.add_class::<PyDepthMap>()?;
    m.add_function(wrap_pyfunction!(compute_pq, m)?)?;
    m.add_function(wrap_pyfunction!(compute_dpq, m)?)?;
    m.add_function(wrap_pyfunction!(compute_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(silog_rse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(silog_rse_grad, m)?)?;
    m.add_function(wrap_pyfunction!(unnormalize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_prediction, m)?)?;
    m.add("D_MAX", depth::DEFAULT_D_MAX)?;
    m.add("LAMBDAS", metrics::DEFAULT_LAMBDAS.to_vec())?;
    m.add("VOID", SegmentRef::VOID.0)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
