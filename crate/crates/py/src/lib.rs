//! Python bindings: synthetic worlds, detectors, the training-mining loop and
//! the geometry / metric helpers.
//!
//! Configs cross the boundary as JSON strings with the same field names as the
//! Rust structs; missing fields take their defaults.

use std::path::PathBuf;

use notercnn_core::geometry;
use notercnn_core::metrics::{self, MapResult};
use notercnn_core::model::{self, Detection};
use notercnn_core::scene::{self, Dataset};
use notercnn_core::trainer::{self, IterationRecord, Schedule, TrainConfig};
use notercnn_core::{BBox, DetectorParams, ModelConfig, VariantFlags, WorldConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type BoxTuple = (f64, f64, f64, f64);

fn py_err(e: notercnn_core::Error) -> PyErr {
    match e {
        notercnn_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
        None => Ok(T::default()),
    }
}

fn to_bbox(b: BoxTuple) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(py_err)
}

fn to_tuple(b: &BBox) -> BoxTuple {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

fn flags_of(variant: &str, iteration: usize) -> PyResult<VariantFlags> {
    let s: Schedule = variant.parse().map_err(py_err)?;
    Ok(s.flags_for(iteration, iteration))
}

/// One image with its groundtruth boxes.
#[pyclass(name = "Scene", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: scene::Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn image_id(&self) -> u64 {
        self.inner.image_id
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Row-major pixel intensities.
    #[getter]
    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels.clone()
    }

    /// `[(box, category), ...]` with boxes as `(x_min, y_min, x_max, y_max)`.
    #[getter]
    fn gt(&self) -> Vec<(BoxTuple, u32)> {
        self.inner.gt.iter().map(|g| (to_tuple(&g.bbox), g.category)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(image_id={}, {}x{}, {} boxes)",
            self.inner.image_id,
            self.inner.width,
            self.inner.height,
            self.inner.gt.len()
        )
    }
}

/// Source and target datasets generated from a world config.
#[pyclass(name = "World", frozen)]
struct PyWorld {
    inner: scene::World,
    config: WorldConfig,
}

impl PyWorld {
    fn split(&self, name: &str) -> PyResult<&Dataset> {
        match name {
            "source_train" => Ok(&self.inner.source_train),
            "source_val" => Ok(&self.inner.source_val),
            "target_train" => Ok(&self.inner.target_train),
            "target_val" => Ok(&self.inner.target_val),
            other => Err(PyValueError::new_err(format!(
                "unknown split {other:?} (source_train, source_val, target_train, target_val)"
            ))),
        }
    }
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut config: WorldConfig = from_json(config_json)?;
        config.seed = seed;
        let inner = scene::generate_world(&config).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    /// Image count per split.
    fn sizes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for name in ["source_train", "source_val", "target_train", "target_val"] {
            d.set_item(name, self.split(name)?.len())?;
        }
        Ok(d)
    }

    fn scene(&self, split: &str, index: usize) -> PyResult<PyScene> {
        let ds = self.split(split)?;
        ds.scenes
            .get(index)
            .cloned()
            .map(|inner| PyScene { inner })
            .ok_or_else(|| PyValueError::new_err(format!("{split} has {} images", ds.len())))
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("world config serializes")
    }
}

/// Detector parameters together with the model config used to run them.
#[pyclass(name = "Detector")]
struct PyDetector {
    params: DetectorParams,
    model: ModelConfig,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    #[pyo3(signature = (path, model_json=None))]
    fn load(path: PathBuf, model_json: Option<&str>) -> PyResult<Self> {
        let params = model::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self {
            params,
            model: from_json(model_json)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.params, &path).map_err(py_err)
    }

    #[getter]
    fn num_categories(&self) -> u32 {
        self.params.num_categories
    }

    #[getter]
    fn first_category(&self) -> u32 {
        self.params.first_category
    }

    /// `[(box, category, score), ...]` sorted by score.
    #[pyo3(signature = (scene, variant="naive"))]
    fn detect(&self, scene: &PyScene, variant: &str) -> PyResult<Vec<(BoxTuple, u32, f64)>> {
        let flags = flags_of(variant, 0)?;
        let dets: Vec<Detection> = model::detect(&scene.inner, &self.params, &flags, &self.model).map_err(py_err)?;
        Ok(dets.iter().map(|d| (to_tuple(&d.bbox), d.category, d.score)).collect())
    }

    /// `{"map_50": .., "map_50_95": ..}` on one split of `world`.
    #[pyo3(signature = (world, split="target_val", variant="naive"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        world: &PyWorld,
        split: &str,
        variant: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let flags = flags_of(variant, 0)?;
        let m = metrics::evaluate_detector(world.split(split)?, &self.params, &flags, &self.model).map_err(py_err)?;
        map_dict(py, &m)
    }
}

fn map_dict<'py>(py: Python<'py>, m: &MapResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("map_50", m.map_50)?;
    d.set_item("map_50_95", m.map_50_95)?;
    Ok(d)
}

fn record_dict<'py>(py: Python<'py>, r: &IterationRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = map_dict(py, &r.evaluation)?;
    d.set_item("iteration", r.iteration)?;
    d.set_item("mined_count", r.mining.mined_count)?;
    d.set_item("mined_precision", r.mining.precision)?;
    d.set_item("mined_recall", r.mining.recall)?;
    d.set_item("epoch_losses", r.epoch_losses.clone())?;
    Ok(d)
}

/// Trains the source detector on the source split of `world`.
#[pyfunction]
#[pyo3(signature = (world, train_json=None, seed=0))]
fn train_source(py: Python<'_>, world: &PyWorld, train_json: Option<&str>, seed: u64) -> PyResult<PyDetector> {
    let mut cfg: TrainConfig = from_json(train_json)?;
    cfg.seed = seed;
    let outcome = py
        .detach(|| trainer::train_source_detector(&world.inner.source_train, &cfg))
        .map_err(py_err)?;
    Ok(PyDetector {
        params: outcome.params,
        model: cfg.model,
    })
}

/// Runs the training-mining loop and returns `(records, final_detector)`,
/// one record dict per iteration.
#[pyfunction]
#[pyo3(signature = (world, source, variant="det-az-rpn-a-distill", seeds_per_category=15, train_json=None, seed=0))]
fn run_training_mining<'py>(
    py: Python<'py>,
    world: &PyWorld,
    source: &PyDetector,
    variant: &str,
    seeds_per_category: usize,
    train_json: Option<&str>,
    seed: u64,
) -> PyResult<(Vec<Bound<'py, PyDict>>, PyDetector)> {
    let mut cfg: TrainConfig = from_json(train_json)?;
    cfg.seed = seed;
    cfg.schedule = variant.parse().map_err(py_err)?;
    let record = py
        .detach(|| {
            let store = trainer::seed_split(&world.inner.target_train, seeds_per_category, seed)?;
            trainer::run_training_mining(
                &source.params,
                &store,
                &world.inner.target_train,
                &world.inner.target_val,
                &cfg,
                &mut |_, _| Ok(()),
            )
        })
        .map_err(py_err)?;
    let records = record
        .iterations
        .iter()
        .map(|r| record_dict(py, r))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((
        records,
        PyDetector {
            params: record.final_params,
            model: cfg.model,
        },
    ))
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(geometry::iou(&to_bbox(a)?, &to_bbox(b)?))
}

/// Indices kept by greedy non-maximum suppression, highest score first.
#[pyfunction]
fn nms(boxes: Vec<BoxTuple>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let boxes = boxes.into_iter().map(to_bbox).collect::<PyResult<Vec<_>>>()?;
    Ok(geometry::nms(&boxes, &scores, iou_threshold))
}

/// 101-point interpolated AP of one category.
#[pyfunction]
fn average_precision(detections: Vec<(BoxTuple, f64)>, gts: Vec<BoxTuple>, iou_threshold: f64) -> PyResult<f64> {
    let dets = detections
        .into_iter()
        .map(|(b, s)| Ok((to_bbox(b)?, s)))
        .collect::<PyResult<Vec<_>>>()?;
    let gts = gts.into_iter().map(to_bbox).collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::average_precision(&dets, &gts, iou_threshold))
}

#[pymodule]
fn notercnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(run_training_mining, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add("VARIANTS", Schedule::NAMED.to_vec())?;
    Ok(())
}
