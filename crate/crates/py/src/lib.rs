//! Python bindings: datasets (synthetic or from disk), graph construction,
//! model training/inference, panoptic evaluation, SVG rendering, and the
//! gradient checker.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use cadspot::autodiff::Tape;
use cadspot::dataset::render::{render_svg, RenderOptions};
use cadspot::dataset::synth::{generate_synthetic, SynthSpec};
use cadspot::dataset::{load_dataset, write_dataset, DrawingRecord};
use cadspot::extract::{extract, ground_truth_prediction, PanopticPrediction};
use cadspot::gradcheck::{model_gradient_check, GradCheckSettings};
use cadspot::graph::{build_graph, DrawingGraph, GraphConfig};
use cadspot::metrics::PqAggregate;
use cadspot::model::{AblationConfig, CeeMode, Checkpoint, ModelConfig, ModelParams};
use cadspot::train::{evaluate_accuracy, train as train_model, TrainConfig};
use cadspot::ClassTable;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A set of labeled drawings plus their class table.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    records: Vec<DrawingRecord>,
    classes: ClassTable,
}

#[pymethods]
impl Dataset {
    /// Generate a synthetic labeled floor-plan dataset.
    #[staticmethod]
    #[pyo3(signature = (seed=0, drawings=8, tables=true))]
    fn synthetic(seed: u64, drawings: usize, tables: bool) -> Dataset {
        let spec = if tables {
            SynthSpec::default()
        } else {
            SynthSpec::without_tables()
        };
        let (classes, records) = generate_synthetic(seed, drawings, &spec);
        Dataset { records, classes }
    }

    /// Load a dataset from a manifest file written by `save` (or the CLI).
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Dataset> {
        let (manifest, records) = load_dataset(&manifest).map_err(value_err)?;
        Ok(Dataset {
            records,
            classes: manifest.classes,
        })
    }

    /// Write records plus a manifest under `dir`; returns the manifest path.
    #[pyo3(signature = (dir, split="train"))]
    fn save(&self, dir: PathBuf, split: &str) -> PyResult<String> {
        let path = write_dataset(&dir, split, &self.records, &self.classes)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(path.display().to_string())
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.classes.num_classes()
    }

    fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    fn record_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Primitives of one drawing as dicts.
    fn primitives<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyList>> {
        let record = self.record(index)?;
        let out = PyList::empty(py);
        for p in &record.primitives {
            let d = PyDict::new(py);
            let json = serde_json::to_value(p).map_err(runtime_err)?;
            if let serde_json::Value::Object(map) = json {
                for (k, v) in map {
                    d.set_item(k, json_to_py(py, &v)?)?;
                }
            }
            out.append(d)?;
        }
        Ok(out)
    }

    /// Render one drawing (optionally with a prediction overlay) to SVG.
    #[pyo3(signature = (index, prediction=None))]
    fn render_svg(&self, index: usize, prediction: Option<&Prediction>) -> PyResult<String> {
        let record = self.record(index)?;
        Ok(render_svg(
            record,
            prediction.map(|p| &p.inner),
            &self.classes,
            &RenderOptions::default(),
        ))
    }
}

impl Dataset {
    fn record(&self, index: usize) -> PyResult<&DrawingRecord> {
        self.records
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("record index {index} out of range")))
    }

    fn build_all(&self, config: &GraphConfig) -> PyResult<Vec<DrawingGraph>> {
        self.records
            .iter()
            .map(|r| build_graph(&r.primitives, config).map_err(value_err))
            .collect()
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None().into_bound(py),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.into_any(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_any()
        }
    })
}

/// The primitive graph of one drawing.
#[pyclass]
struct Graph {
    inner: DrawingGraph,
}

#[pymethods]
impl Graph {
    /// Build the graph of drawing `index` in a dataset.
    #[staticmethod]
    #[pyo3(signature = (dataset, index, epsilon=300.0, max_degree=30, seed=0))]
    fn build(dataset: &Dataset, index: usize, epsilon: f64, max_degree: usize, seed: u64) -> PyResult<Graph> {
        let record = dataset.record(index)?;
        let config = GraphConfig {
            epsilon,
            max_degree,
            rng_seed: seed,
            ..GraphConfig::default()
        };
        let inner = build_graph(&record.primitives, &config).map_err(value_err)?;
        Ok(Graph { inner })
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    fn degree_histogram(&self) -> Vec<usize> {
        self.inner.degree_histogram()
    }

    /// Directed edges as (source, target) pairs.
    fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.inner.num_edges())
            .map(|e| (self.inner.edge_src(e), self.inner.edge_dst(e)))
            .collect()
    }

    fn semantic_labels(&self) -> Vec<usize> {
        self.inner.semantic_labels()
    }
}

/// A panoptic prediction for one drawing.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Prediction {
    inner: PanopticPrediction,
}

#[pymethods]
impl Prediction {
    #[getter]
    fn vertex_classes(&self) -> Vec<usize> {
        self.inner.vertex_classes.clone()
    }

    /// Thing instances as dicts with class, members, confidence, and bbox.
    fn instances<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        symbols_to_py(py, &self.inner.instances)
    }

    fn stuff_regions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        symbols_to_py(py, &self.inner.stuff_regions)
    }
}

fn symbols_to_py<'py>(
    py: Python<'py>,
    symbols: &[cadspot::SymbolInstance],
) -> PyResult<Bound<'py, PyList>> {
    let out = PyList::empty(py);
    for s in symbols {
        let d = PyDict::new(py);
        d.set_item("class_id", s.class_id)?;
        d.set_item("members", s.members.clone())?;
        d.set_item("confidence", s.confidence)?;
        d.set_item(
            "bbox",
            (s.bbox.min.x, s.bbox.min.y, s.bbox.max.x, s.bbox.max.y),
        )?;
        out.append(d)?;
    }
    Ok(out)
}

/// The spotting network: configuration, parameters, training, inference.
#[pyclass]
struct Model {
    model: ModelParams,
    graph_config: GraphConfig,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (num_classes, stages=8, heads=8, width=128, seed=0, rse=true, cee="sum", epsilon=300.0, max_degree=30))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_classes: usize,
        stages: usize,
        heads: usize,
        width: usize,
        seed: u64,
        rse: bool,
        cee: &str,
        epsilon: f64,
        max_degree: usize,
    ) -> PyResult<Model> {
        let config = ModelConfig::with_width(stages, heads, width, num_classes);
        let cee = match cee {
            "off" => CeeMode::Off,
            "sum" => CeeMode::SumAll,
            other => {
                let stage: usize = other
                    .parse()
                    .map_err(|_| PyValueError::new_err("cee must be 'off', 'sum', or a 1-based stage number"))?;
                if stage == 0 || stage > stages {
                    return Err(PyValueError::new_err(format!(
                        "cee stage {stage} out of range 1..={stages}"
                    )));
                }
                CeeMode::Single(stage - 1)
            }
        };
        let model = ModelParams::new(config, AblationConfig { rse, cee }, seed).map_err(value_err)?;
        Ok(Model {
            model,
            graph_config: GraphConfig {
                epsilon,
                max_degree,
                rng_seed: seed,
                ..GraphConfig::default()
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        let model = Checkpoint::load(&path)
            .and_then(Checkpoint::into_model)
            .map_err(value_err)?;
        Ok(Model {
            model,
            graph_config: GraphConfig::default(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.model)
            .save(Path::new(&path))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_parameters()
    }

    /// Train on every drawing of a dataset; returns the per-epoch log as a
    /// list of dicts.
    #[pyo3(signature = (dataset, epochs=100, lr=0.001, lambda_=2.0, seed=0))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &Dataset,
        epochs: usize,
        lr: f64,
        lambda_: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyList>> {
        if dataset.num_classes() != self.model.config.num_classes {
            return Err(PyValueError::new_err(format!(
                "model expects {} classes, dataset has {}",
                self.model.config.num_classes,
                dataset.num_classes()
            )));
        }
        let graphs = dataset.build_all(&self.graph_config)?;
        let cfg = TrainConfig {
            epochs,
            lr,
            lambda: lambda_,
            rng_seed: seed,
            ..TrainConfig::default()
        };
        let classes = dataset.classes.clone();
        let model = &mut self.model;
        let outcome = py
            .detach(|| train_model(model, &graphs, &[], &classes, &cfg, None, |_| true))
            .map_err(runtime_err)?;

        let log = PyList::empty(py);
        for r in &outcome.log {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("lr", r.lr)?;
            d.set_item("train_loss_sem", r.train_loss_sem)?;
            d.set_item("train_loss_ins", r.train_loss_ins)?;
            log.append(d)?;
        }
        Ok(log)
    }

    /// Panoptic prediction for one drawing.
    #[pyo3(signature = (dataset, index, threshold=0.7))]
    fn predict(&self, py: Python<'_>, dataset: &Dataset, index: usize, threshold: f64) -> PyResult<Prediction> {
        let record = dataset.record(index)?;
        let classes = dataset.classes.clone();
        let model = &self.model;
        let graph_config = self.graph_config;
        let inner = py
            .detach(move || -> Result<PanopticPrediction, String> {
                let graph =
                    build_graph(&record.primitives, &graph_config).map_err(|e| e.to_string())?;
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &graph).map_err(|e| e.to_string())?;
                Ok(extract(
                    tape.value(out.semantic_probs),
                    model.config.num_classes,
                    tape.value(out.adjacency_probs),
                    &graph,
                    threshold,
                    &classes,
                ))
            })
            .map_err(runtime_err)?;
        Ok(Prediction { inner })
    }

    /// Pooled panoptic quality and semantic accuracy over a dataset.
    #[pyo3(signature = (dataset, threshold=0.7))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        threshold: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let graphs = dataset.build_all(&self.graph_config)?;
        let classes = dataset.classes.clone();
        let model = &self.model;
        let (report, accuracy) = py
            .detach(move || -> Result<_, String> {
                let mut agg = PqAggregate::default();
                for graph in &graphs {
                    let mut tape = Tape::new();
                    let out = model.forward(&mut tape, graph).map_err(|e| e.to_string())?;
                    let pred = extract(
                        tape.value(out.semantic_probs),
                        model.config.num_classes,
                        tape.value(out.adjacency_probs),
                        graph,
                        threshold,
                        &classes,
                    );
                    let gt = ground_truth_prediction(graph, &classes);
                    let preds: Vec<_> = pred.symbols().cloned().collect();
                    let gts: Vec<_> = gt.symbols().cloned().collect();
                    agg.add_drawing(&preds, &gts, graph).map_err(|e| e.to_string())?;
                }
                let accuracy = evaluate_accuracy(model, &graphs).map_err(|e| e.to_string())?;
                Ok((agg.finish(), accuracy))
            })
            .map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("pq", report.overall.pq)?;
        d.set_item("sq", report.overall.sq)?;
        d.set_item("rq", report.overall.rq)?;
        d.set_item("accuracy", accuracy)?;
        Ok(d)
    }
}

/// Check model gradients against central finite differences on the small
/// built-in fixture.
#[pyfunction]
#[pyo3(signature = (seed=101, h=1e-5, tolerance=1e-4))]
fn gradient_check(py: Python<'_>, seed: u64, h: f64, tolerance: f64) -> PyResult<Py<PyDict>> {
    let settings = GradCheckSettings { seed, h, tolerance };
    let report = py
        .detach(|| model_gradient_check(&settings))
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("max_rel_error", report.max_rel_error)?;
    d.set_item("worst_param", report.worst_param.clone())?;
    d.set_item("passed", report.passed())?;
    Ok(d.into())
}

#[pymodule]
fn cadspot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Graph>()?;
    m.add_class::<Model>()?;
    m.add_class::<Prediction>()?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
