use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fevpr_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use fevpr_core::cli::compact_model;
use fevpr_core::dataset::{load_traverse, LoadConfig, Position};
use fevpr_core::evaluation::{distance_matrix, evaluate_model, recall_at_n, DistanceMatrix};
use fevpr_core::model::{Ablation, FusionVpr, ModelConfig, PreparedSet, ABLATION_PRESETS};
use fevpr_core::nn::Mode;
use fevpr_core::training::{self, Precision, TrainConfig};
use fevpr_core::tsfe::Modality;
use fevpr_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Validation(_) | Error::Shape(_) | Error::Config(_) | Error::Parse { .. } | Error::File { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn model_config(config_toml: Option<&str>, compact: bool) -> PyResult<ModelConfig> {
    match config_toml {
        Some(t) => toml_model(t),
        None if compact => Ok(compact_model()),
        None => Ok(ModelConfig::default()),
    }
}

fn toml_model(text: &str) -> PyResult<ModelConfig> {
    fevpr_core::config::RunConfig::from_toml(text)
        .map(|c| c.train.model)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Network: two-stream encoder, pyramid backbone, VLAD heads and re-weighting.
#[pyclass(name = "Model")]
struct PyModel {
    inner: FusionVpr,
}

#[pymethods]
impl PyModel {
    /// `config_toml` is a run-config document; only its `[train.model]` table is used.
    #[new]
    #[pyo3(signature = (config_toml=None, ablation=None, seed=0, compact=false))]
    fn new(config_toml: Option<&str>, ablation: Option<&str>, seed: u64, compact: bool) -> PyResult<Self> {
        let mut cfg = model_config(config_toml, compact)?;
        if let Some(a) = ablation {
            cfg.ablation = fevpr_core::cli::parse_ablation(a).map_err(err)?;
        }
        Ok(Self {
            inner: FusionVpr::new(cfg, Precision::F32.dtype(), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?.model,
        })
    }

    /// Save parameters (no optimizer state). Returns the checkpoint id.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        let mut config = TrainConfig::default();
        config.model = self.inner.config.clone();
        let meta = CheckpointMeta {
            config,
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
            optimizer: None,
        };
        save_checkpoint(&path, &self.inner, None, &meta).map_err(err)
    }

    #[getter]
    fn descriptor_len(&self) -> usize {
        self.inner.config.descriptor_len()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.inner.config.input_width, self.inner.config.input_height)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_trainable()
    }

    /// Descriptors of every sample in a traverse, one list per sample.
    #[pyo3(signature = (traverse, batch=16))]
    fn describe(&self, py: Python<'_>, traverse: &PyTraverse, batch: usize) -> PyResult<Vec<Vec<f32>>> {
        let idx: Vec<usize> = (0..traverse.inner.len()).collect();
        let n = self.inner.config.descriptor_len();
        let flat = py
            .detach(|| self.inner.describe(&traverse.inner, &idx, batch))
            .map_err(err)?;
        Ok(flat.chunks(n).map(<[f32]>::to_vec).collect())
    }

    /// Raw inputs: `frames` is `count·C·H·W` and `events` is `count·2·H·W`, row-major.
    fn describe_arrays(&self, frames: Vec<f32>, events: Vec<f32>, count: usize) -> PyResult<Vec<Vec<f32>>> {
        let c = &self.inner.config;
        let (w, h, fc) = (c.input_width, c.input_height, c.frame_channels);
        let set = PreparedSet {
            name: "arrays".into(),
            frames,
            events,
            positions: vec![Position::Planar { x: 0.0, y: 0.0 }; count],
            timestamps: (0..count as u64).collect(),
            frame_channels: fc,
            width: w,
            height: h,
        };
        if set.frames.len() != count * fc * w * h || set.events.len() != count * 2 * w * h {
            return Err(PyValueError::new_err(format!(
                "expected {} frame and {} event values for {count} samples",
                count * fc * w * h,
                count * 2 * w * h
            )));
        }
        let idx: Vec<usize> = (0..count).collect();
        let (f, e) = set.batch(&idx, self.inner.dtype()).map_err(err)?;
        let out = self.inner.forward(&f, &e, Mode::Eval).map_err(err)?;
        out.descriptor
            .to_dtype(Precision::F32.dtype())
            .and_then(|t| t.to_vec2::<f32>())
            .map_err(|e| err(e.into()))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(width={}, clusters={}, input={}x{}, descriptor_len={})",
            c.width,
            c.clusters,
            c.input_width,
            c.input_height,
            c.descriptor_len()
        )
    }
}

/// A traverse resampled to a model's input size.
#[pyclass(name = "Traverse")]
struct PyTraverse {
    inner: PreparedSet,
}

#[pymethods]
impl PyTraverse {
    /// Load `frames/`, `events.csv` and `poses.csv` from a traverse directory.
    #[staticmethod]
    #[pyo3(signature = (path, model, window_us=25_000))]
    fn load(py: Python<'_>, path: PathBuf, model: &PyModel, window_us: u64) -> PyResult<Self> {
        let load = LoadConfig {
            window_us,
            frame_channels: model.inner.config.frame_channels,
            ..Default::default()
        };
        let cfg = model.inner.config.clone();
        let inner = py
            .detach(|| load_traverse(&path, &load).and_then(|t| PreparedSet::from_traverse(&t, &cfg)))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// `(lat, lon)` or `(x, y)` per sample.
    #[getter]
    fn positions(&self) -> Vec<(f64, f64)> {
        self.inner.positions.iter().map(Position::coords).collect()
    }

    #[getter]
    fn timestamps(&self) -> Vec<u64> {
        self.inner.timestamps.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
#[pyo3(signature = (out, places=32, image_size=64, seed=0))]
fn synth(out: PathBuf, places: usize, image_size: usize, seed: u64) -> PyResult<Vec<String>> {
    let cfg = fevpr_core::synthetic::WorldConfig {
        places,
        image_size,
        seed,
        ..Default::default()
    };
    fevpr_core::synthetic::write_world(&out, &cfg).map_err(err)
}

#[pyfunction]
fn ablation_presets() -> Vec<String> {
    ABLATION_PRESETS.iter().map(|(n, _)| n.to_string()).collect()
}

/// Switch set of a preset or switch list, as `(modality, attention, head, max_pool_weights)`.
#[pyfunction]
fn parse_ablation(spec: &str) -> PyResult<(String, bool, String, bool)> {
    let a: Ablation = fevpr_core::cli::parse_ablation(spec).map_err(err)?;
    Ok((
        match a.modality {
            Modality::Fused => "fused",
            Modality::FrameOnly => "frame_only",
            Modality::EventOnly => "event_only",
        }
        .to_string(),
        a.attention,
        a.head.to_string(),
        a.max_pool_weights,
    ))
}

#[pyfunction]
#[pyo3(signature = (q, positives, negatives, margin=0.1))]
fn triplet_loss(q: Vec<f32>, positives: Vec<Vec<f32>>, negatives: Vec<Vec<f32>>, margin: f64) -> PyResult<f64> {
    let p: Vec<&[f32]> = positives.iter().map(Vec::as_slice).collect();
    let n: Vec<&[f32]> = negatives.iter().map(Vec::as_slice).collect();
    training::triplet_loss(&q, &p, &n, margin).map_err(err)
}

fn planar(v: &[(f64, f64)]) -> Vec<Position> {
    v.iter().map(|&(x, y)| Position::Planar { x, y }).collect()
}

/// Recall@N from a distance matrix (list of rows) and planar positions.
#[pyfunction]
#[pyo3(signature = (distances, query_positions, database_positions, phi=75.0, ns=vec![1, 5, 10, 20]))]
fn recall_at(
    distances: Vec<Vec<f32>>,
    query_positions: Vec<(f64, f64)>,
    database_positions: Vec<(f64, f64)>,
    phi: f64,
    ns: Vec<usize>,
) -> PyResult<BTreeMap<usize, f64>> {
    let rows = distances.len();
    let cols = distances.first().map_or(0, Vec::len);
    let dist = DistanceMatrix::new(rows, cols, distances.concat()).map_err(err)?;
    recall_at_n(&dist, &planar(&query_positions), &planar(&database_positions), phi, &ns).map_err(err)
}

/// Squared-Euclidean distances between two descriptor sets.
#[pyfunction]
fn distances(queries: Vec<Vec<f32>>, database: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let dim = queries.first().or(database.first()).map_or(0, Vec::len);
    let d = distance_matrix(&queries.concat(), &database.concat(), dim).map_err(err)?;
    Ok((0..d.rows).map(|r| d.row(r).to_vec()).collect())
}

/// Score `query` against `database`; returns recalls, F1-max and per-query success.
#[pyfunction]
#[pyo3(signature = (model, database, query, phi=75.0, ns=vec![1, 5, 10, 20]))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    database: &PyTraverse,
    query: &PyTraverse,
    phi: f64,
    ns: Vec<usize>,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let r = py
        .detach(|| evaluate_model(&model.inner, &database.inner, &query.inner, phi, &ns, 16))
        .map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("recalls", r.recalls.clone())?;
    d.set_item("recall_at_1", r.recall_at_1())?;
    d.set_item("f1_max", r.f1_max)?;
    d.set_item("success", r.success.clone())?;
    Ok(d)
}

/// Train from a run-config TOML document. Returns the trained model and the log records.
#[pyfunction]
#[pyo3(signature = (config_toml, database, query, validation=None, out_dir=None))]
fn train(
    py: Python<'_>,
    config_toml: &str,
    database: &PyTraverse,
    query: &PyTraverse,
    validation: Option<&PyTraverse>,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<BTreeMap<String, f64>>)> {
    let cfg = fevpr_core::config::RunConfig::from_toml(config_toml)
        .map_err(|e| PyValueError::new_err(e.to_string()))?
        .train;
    let outcome = py
        .detach(|| {
            training::train(
                &database.inner,
                &query.inner,
                validation.map(|v| &v.inner),
                &cfg,
                out_dir.as_deref(),
            )
        })
        .map_err(err)?;
    let history = outcome
        .history
        .iter()
        .map(|h| {
            BTreeMap::from([
                ("epoch".to_string(), h.epoch as f64),
                ("batch".to_string(), h.batch as f64),
                ("loss".to_string(), h.loss),
                ("smoothed_loss".to_string(), h.smoothed_loss),
                ("lr".to_string(), h.lr),
                ("recall@1".to_string(), h.recall_at_1.unwrap_or(f64::NAN)),
            ])
        })
        .collect();
    Ok((PyModel { inner: outcome.model }, history))
}

#[pymodule]
fn fevpr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyTraverse>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_presets, m)?)?;
    m.add_function(wrap_pyfunction!(parse_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at, m)?)?;
    m.add_function(wrap_pyfunction!(distances, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
