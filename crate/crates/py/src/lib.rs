//! Python bindings: boxes, detections, CAM-to-box conversion, NMS, fusion,
//! EMA updates, evaluation and the simulated training run.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wsdet_core::ema::{self, NormStrategy, ParameterState};
use wsdet_core::fusion::{self, DEFAULT_CAM_EPOCHS, DEFAULT_TAU_NMS};
use wsdet_core::heatmap::{self, DEFAULT_MAX_AREA, DEFAULT_MIN_AREA, DEFAULT_TAU};
use wsdet_core::metrics::{self, EvalSet, DEFAULT_IOU, DEFAULT_TARGET_FPPI};
use wsdet_core::toydet::{run_benchmark, TrainConfig};
use wsdet_core::{BoundingBox, CamBoxConfig, Connectivity, Detection, Error, Heatmap, Source};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "BoundingBox", module = "wsdet", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
pub struct PyBoundingBox(BoundingBox);

#[pymethods]
impl PyBoundingBox {
    #[new]
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> PyResult<Self> {
        BoundingBox::new(x0, y0, x1, y1).map(Self).map_err(to_py)
    }

    #[getter]
    fn x0(&self) -> f64 {
        self.0.x0()
    }

    #[getter]
    fn y0(&self) -> f64 {
        self.0.y0()
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1()
    }

    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1()
    }

    #[getter]
    fn width(&self) -> f64 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> f64 {
        self.0.height()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBoundingBox) -> f64 {
        self.0.iou(&other.0)
    }

    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn __repr__(&self) -> String {
        let [x0, y0, x1, y1] = self.0.to_array();
        format!("BoundingBox({x0}, {y0}, {x1}, {y1})")
    }
}

fn parse_source(s: &str) -> PyResult<Source> {
    match s {
        "teacher" => Ok(Source::Teacher),
        "cam" => Ok(Source::Cam),
        "ground-truth" => Ok(Source::GroundTruth),
        _ => Err(PyValueError::new_err(format!(
            "unknown source {s:?}; expected teacher, cam or ground-truth"
        ))),
    }
}

#[pyclass(name = "Detection", module = "wsdet", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
pub struct PyDetection(Detection);

#[pymethods]
impl PyDetection {
    #[new]
    #[pyo3(signature = (score, r#box, source = "teacher"))]
    fn new(score: f64, r#box: PyBoundingBox, source: &str) -> PyResult<Self> {
        Detection::new(score, r#box.0, parse_source(source)?)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }

    #[getter]
    fn r#box(&self) -> PyBoundingBox {
        PyBoundingBox(self.0.bbox)
    }

    #[getter]
    fn source(&self) -> String {
        self.0.source.to_string()
    }

    fn __repr__(&self) -> String {
        let [x0, y0, x1, y1] = self.0.bbox.to_array();
        format!(
            "Detection({}, BoundingBox({x0}, {y0}, {x1}, {y1}), {:?})",
            self.0.score,
            self.0.source.to_string()
        )
    }
}

fn unwrap_dets(dets: &[PyDetection]) -> Vec<Detection> {
    dets.iter().map(|d| d.0).collect()
}

fn wrap_dets(dets: Vec<Detection>) -> Vec<PyDetection> {
    dets.into_iter().map(PyDetection).collect()
}

#[pyfunction]
fn iou(a: PyBoundingBox, b: PyBoundingBox) -> f64 {
    a.0.iou(&b.0)
}

/// Greedy non-maximum suppression; equal scores keep the earlier box.
#[pyfunction]
#[pyo3(signature = (detections, tau_nms = DEFAULT_TAU_NMS))]
fn nms(detections: Vec<PyDetection>, tau_nms: f64) -> Vec<PyDetection> {
    wrap_dets(fusion::nms(&unwrap_dets(&detections), tau_nms))
}

/// Boxes around the connected components of `heatmap > tau` whose pixel
/// count lies in `[min_area, max_area]`. `heatmap` is a list of rows.
#[pyfunction]
#[pyo3(signature = (
    heatmap,
    tau = DEFAULT_TAU,
    min_area = DEFAULT_MIN_AREA,
    max_area = DEFAULT_MAX_AREA,
    score = 1.0,
    connectivity = 8,
))]
fn cam_to_boxes(
    heatmap: Vec<Vec<f32>>,
    tau: f64,
    min_area: usize,
    max_area: usize,
    score: f64,
    connectivity: u8,
) -> PyResult<Vec<PyDetection>> {
    let height = heatmap.len();
    let width = heatmap.first().map_or(0, Vec::len);
    if heatmap.iter().any(|row| row.len() != width) {
        return Err(PyValueError::new_err("heatmap rows differ in length"));
    }
    let connectivity = match connectivity {
        4 => Connectivity::Four,
        8 => Connectivity::Eight,
        c => return Err(PyValueError::new_err(format!("connectivity must be 4 or 8, got {c}"))),
    };
    let h = Heatmap::new(width, height, heatmap.concat()).map_err(to_py)?;
    let config = CamBoxConfig {
        tau,
        min_area,
        max_area,
        connectivity,
    };
    heatmap::cam_to_boxes(&h, &config, score)
        .map(wrap_dets)
        .map_err(to_py)
}

/// Pseudo-labels for one weakly annotated image.
#[pyfunction]
#[pyo3(signature = (teacher, cam, tau_nms = DEFAULT_TAU_NMS, epoch = 0, cam_epochs = DEFAULT_CAM_EPOCHS))]
fn fuse_pseudo_labels(
    teacher: Vec<PyDetection>,
    cam: Vec<PyDetection>,
    tau_nms: f64,
    epoch: usize,
    cam_epochs: usize,
) -> Vec<PyDetection> {
    wrap_dets(fusion::fuse_pseudo_labels(
        &unwrap_dets(&teacher),
        &unwrap_dets(&cam),
        tau_nms,
        epoch,
        cam_epochs,
    ))
}

#[pyclass(name = "ParameterState", module = "wsdet", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyParameterState(ParameterState);

#[pymethods]
impl PyParameterState {
    #[new]
    fn new(theta: Vec<f64>, norm_mean: Vec<f64>, norm_var: Vec<f64>) -> PyResult<Self> {
        ParameterState::new(theta, norm_mean, norm_var)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.0.theta.clone()
    }

    #[getter]
    fn norm_mean(&self) -> Vec<f64> {
        self.0.norm_mean.clone()
    }

    #[getter]
    fn norm_var(&self) -> Vec<f64> {
        self.0.norm_var.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "ParameterState(theta=<{}>, norm=<{}>)",
            self.0.theta.len(),
            self.0.norm_mean.len()
        )
    }
}

/// `alpha * teacher.theta + (1 - alpha) * student.theta`.
#[pyfunction]
#[pyo3(signature = (teacher, student, alpha = ema::DEFAULT_ALPHA))]
fn ema_update(teacher: PyParameterState, student: PyParameterState, alpha: f64) -> PyResult<PyParameterState> {
    ema::ema_update(&teacher.0, &student.0, alpha)
        .map(PyParameterState)
        .map_err(to_py)
}

/// Applies "frozen", "open" or "ema" normalization handling to one step;
/// returns `(teacher, student)`.
#[pyfunction]
#[pyo3(signature = (
    strategy,
    teacher,
    student,
    batch_mean,
    batch_var,
    momentum = ema::DEFAULT_BN_MOMENTUM,
    alpha = ema::DEFAULT_ALPHA,
))]
fn apply_norm_strategy(
    strategy: &str,
    teacher: PyParameterState,
    student: PyParameterState,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    momentum: f64,
    alpha: f64,
) -> PyResult<(PyParameterState, PyParameterState)> {
    let strategy = match strategy {
        "frozen" => NormStrategy::Frozen,
        "open" => NormStrategy::Open { momentum },
        "ema" => NormStrategy::Ema { momentum, alpha },
        s => return Err(PyValueError::new_err(format!("unknown strategy {s:?}"))),
    };
    let (t, s) = ema::apply_norm_strategy(strategy, &teacher.0, &student.0, &batch_mean, &batch_var)
        .map_err(to_py)?;
    Ok((PyParameterState(t), PyParameterState(s)))
}

/// mAP, recall at `target_fppi` and the FROC curve.
///
/// `ground_truth` maps every image id (lesion-free images map to an empty
/// list) to its boxes; `detections` maps image ids to detections.
#[pyfunction]
#[pyo3(signature = (ground_truth, detections, iou = DEFAULT_IOU, target_fppi = DEFAULT_TARGET_FPPI))]
fn evaluate<'py>(
    py: Python<'py>,
    ground_truth: BTreeMap<String, Vec<PyBoundingBox>>,
    detections: BTreeMap<String, Vec<PyDetection>>,
    iou: f64,
    target_fppi: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut set = EvalSet::new();
    for (id, boxes) in ground_truth {
        set.add_image(id.clone());
        for b in boxes {
            set.add_ground_truth(id.clone(), b.0);
        }
    }
    for (id, dets) in detections {
        for d in dets {
            set.add_detection(&id, d.0).map_err(to_py)?;
        }
    }
    let map = metrics::mean_average_precision(&set, iou).map_err(to_py)?;
    let curve = metrics::froc(&set, iou).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("map", map)?;
    out.set_item(
        "recall_at_fppi",
        metrics::recall_at_fppi(&curve, target_fppi).map_err(to_py)?,
    )?;
    out.set_item("froc", curve.points().to_vec())?;
    Ok(out)
}

/// Trains on the synthetic benchmark; `config` is a JSON object with any
/// subset of the training options. Returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn train_sim(py: Python<'_>, config: Option<&str>) -> PyResult<String> {
    let config: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let report = py.detach(|| run_benchmark(&config)).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn wsdet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBoundingBox>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyParameterState>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(cam_to_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add_function(wrap_pyfunction!(apply_norm_strategy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train_sim, m)?)?;
    Ok(())
}
