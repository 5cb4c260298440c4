//! Python bindings: label maps, colouring checks, metrics, loss, synthetic data
//! and model inference.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fcrseg_core::config::RunConfig;
use fcrseg_core::graph::{build_adjacency, four_colorable};
use fcrseg_core::loss::{total_loss, LossConfig};
use fcrseg_core::metrics::score_image;
use fcrseg_core::net::{build, load_checkpoint, save_checkpoint};
use fcrseg_core::postprocess::PostprocessConfig;
use fcrseg_core::{EmbeddingMap, Error, ModelState, RawImage};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Shape { .. } | Error::Config(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Instance label map; 0 is background.
#[pyclass(name = "LabelImage", module = "fcrseg", from_py_object)]
#[derive(Clone)]
struct PyLabelImage {
    inner: fcrseg_core::LabelImage,
}

#[pymethods]
impl PyLabelImage {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u32>) -> PyResult<Self> {
        let inner = fcrseg_core::LabelImage::new(height, width, labels).map_err(py_err)?;
        Ok(PyLabelImage { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = fcrseg_core::imgdata::read_labels(&path).map_err(py_err)?;
        Ok(PyLabelImage { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        fcrseg_core::imgdata::write_labels(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Row-major label values.
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    fn num_instances(&self) -> usize {
        self.inner.num_instances()
    }

    fn __repr__(&self) -> String {
        format!(
            "LabelImage({}x{}, {} instances)",
            self.inner.height(),
            self.inner.width(),
            self.inner.num_instances()
        )
    }
}

/// Edges of the object adjacency graph.
#[pyfunction]
#[pyo3(signature = (labels, radius=3, include_background=true))]
fn adjacency(labels: &PyLabelImage, radius: usize, include_background: bool) -> PyResult<Vec<(u32, u32)>> {
    let g = build_adjacency(&labels.inner, radius, include_background).map_err(py_err)?;
    Ok(g.edges())
}

/// `{object id: colour}` if the adjacency graph is k-colourable, else None.
#[pyfunction]
#[pyo3(signature = (labels, radius=3, k=4, include_background=true))]
fn color_check(
    labels: &PyLabelImage,
    radius: usize,
    k: usize,
    include_background: bool,
) -> PyResult<Option<BTreeMap<u32, usize>>> {
    let g = build_adjacency(&labels.inner, radius, include_background).map_err(py_err)?;
    Ok(four_colorable(&g, k).map_err(py_err)?.map(|c| c.assignment))
}

/// Dice2, AJI, F1 and PQ of a prediction against ground truth.
#[pyfunction]
fn score(pred: &PyLabelImage, gt: &PyLabelImage) -> PyResult<BTreeMap<&'static str, f64>> {
    let (s, _) = score_image(&pred.inner, &gt.inner).map_err(py_err)?;
    Ok(BTreeMap::from([("dice2", s.dice2), ("aji", s.aji), ("f1", s.f1), ("pq", s.pq)]))
}

/// Loss terms for a pixel-major `height × width × k` embedding.
#[pyfunction]
#[pyo3(signature = (embedding, k, labels, radius=3, include_background=true))]
fn loss(
    embedding: Vec<f64>,
    k: usize,
    labels: &PyLabelImage,
    radius: usize,
    include_background: bool,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let emb = EmbeddingMap::new(labels.inner.height(), labels.inner.width(), k, embedding).map_err(py_err)?;
    let g = build_adjacency(&labels.inner, radius, include_background).map_err(py_err)?;
    let b = total_loss(&emb, &labels.inner, &g, &LossConfig::default()).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("l_intra", b.l_intra),
        ("l_inter", b.l_inter),
        ("total", b.total),
    ]))
}

/// Synthetic dataset as `(name, split, pixels, labels)` tuples.
#[pyfunction]
#[pyo3(signature = (n, height=128, width=128, density=0.3, seed=1))]
fn synth(
    n: usize,
    height: usize,
    width: usize,
    density: f64,
    seed: u64,
) -> PyResult<Vec<(String, &'static str, Vec<f32>, PyLabelImage)>> {
    let data = fcrseg_core::imgdata::synth_blobs(n, (height, width), density, seed).map_err(py_err)?;
    let tag = |split: &'static str, s: fcrseg_core::Sample| {
        (s.name, split, s.image.pixels().to_vec(), PyLabelImage { inner: s.label })
    };
    Ok(data
        .train
        .into_iter()
        .map(|s| tag("train", s))
        .chain(data.eval.into_iter().map(|s| tag("eval", s)))
        .collect())
}

/// Trained or freshly initialised network.
#[pyclass(name = "Model", module = "fcrseg")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// New network from a preset (`desk` or `paper`).
    #[staticmethod]
    #[pyo3(signature = (preset="desk", seed=0))]
    fn build(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::preset(preset).map_err(py_err)?;
        Ok(PyModel {
            inner: build(&cfg.net, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.config.input_size
    }

    /// Instance labels for a row-major grey image, at the model input size.
    #[pyo3(signature = (pixels, height, width, alpha=8.0))]
    fn predict(&self, pixels: Vec<f32>, height: usize, width: usize, alpha: f64) -> PyResult<PyLabelImage> {
        let img = RawImage::new(height, width, pixels).map_err(py_err)?;
        let inner = fcrseg_core::trainer::predict(&self.inner, &img, alpha, &PostprocessConfig::default())
            .map_err(py_err)?;
        Ok(PyLabelImage { inner })
    }
}

/// Runs the `fcrseg` command line and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    fcrseg_core::cli::main(std::iter::once("fcrseg".to_string()).chain(args))
}

#[pymodule]
pub fn fcrseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(color_check, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
