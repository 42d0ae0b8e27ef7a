//! Python bindings for `tokidle_core`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use tokidle_core::complexity::{macs_sweep, model_macs, TABLE_RATIOS};
use tokidle_core::cut_loss::{
    assoc, cross_set_mass, graph_cut, inter_loss, intra_loss, ncut_attention, HeadReduction,
    PartitionedAttention,
};
use tokidle_core::diagnostics::{cosine_smoothness, diagnose as run_diagnose};
use tokidle_core::token_idle::{select_tokens, KeepSchedule, Mode, TokenPartition, DEFAULT_NUM_STAGES};
use tokidle_core::train::{
    evaluate as run_evaluate, gen_synthetic_dataset, grad_check as run_grad_check, train as run_train,
    SyntheticDataset, TrainConfig,
};
use tokidle_core::vit::{vit_forward, AttentionMap, ModelParams, ViTConfig};
use tokidle_core::{Error, Tensor};

create_exception!(tokidle, TokidleError, PyException);
create_exception!(tokidle, ContractError, TokidleError);
create_exception!(tokidle, NumericError, TokidleError);

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => NumericError::new_err(e.to_string()),
        Error::Io { .. } | Error::Json { .. } | Error::Format { .. } => TokidleError::new_err(e.to_string()),
        _ => ContractError::new_err(e.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for Result<T, Error> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Parses `text` with Python's `json` so structured results arrive as dicts and lists.
fn from_json(py: Python<'_>, text: String) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn json_err(e: serde_json::Error) -> PyErr {
    TokidleError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "inference" => Ok(Mode::Inference),
        "finetune" => Ok(Mode::Finetune),
        "hard_prune" => Ok(Mode::HardPrune),
        other => Err(ContractError::new_err(format!(
            "unknown mode {other:?}; expected inference, finetune or hard_prune"
        ))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).or_raise()
}

fn partition_of(n: usize, selected: Vec<usize>) -> PyResult<TokenPartition> {
    let idle = (0..n).filter(|t| !selected.contains(t)).collect();
    TokenPartition::new(selected, idle, n).or_raise()
}

#[pyclass(name = "ViTConfig", module = "tokidle", skip_from_py_object)]
#[derive(Clone)]
struct PyViTConfig {
    inner: ViTConfig,
}

#[pymethods]
impl PyViTConfig {
    #[new]
    #[pyo3(signature = (image_size, patch_size, channels_in, embed_dim, num_heads, num_layers, ffn_ratio, num_classes))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_size: usize,
        patch_size: usize,
        channels_in: usize,
        embed_dim: usize,
        num_heads: usize,
        num_layers: usize,
        ffn_ratio: usize,
        num_classes: usize,
    ) -> PyResult<Self> {
        let inner = ViTConfig {
            image_size,
            patch_size,
            channels_in,
            embed_dim,
            num_heads,
            num_layers,
            ffn_ratio,
            num_classes,
        };
        inner.validate().or_raise()?;
        Ok(PyViTConfig { inner })
    }

    #[staticmethod]
    fn toy() -> Self {
        PyViTConfig { inner: ViTConfig::toy() }
    }

    #[staticmethod]
    fn deit_small() -> Self {
        PyViTConfig { inner: ViTConfig::deit_small() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ViTConfig = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().or_raise()?;
        Ok(PyViTConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[getter]
    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    /// Pixel extents `(H, W, C_in)` of one input image.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        (self.inner.image_size, self.inner.image_size, self.inner.channels_in)
    }

    fn __repr__(&self) -> String {
        format!("ViTConfig({:?})", self.inner)
    }
}

/// Model weights together with their architecture.
#[pyclass(name = "Model", module = "tokidle")]
struct PyModel {
    config: ViTConfig,
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn init(config: PyRef<'_, PyViTConfig>, seed: u64) -> PyResult<Self> {
        let params = ModelParams::init(&config.inner, seed).or_raise()?;
        Ok(PyModel { config: config.inner.clone(), params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, params) = ModelParams::load_checkpoint(&path).or_raise()?;
        Ok(PyModel { config, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save_checkpoint(&path, &self.config).or_raise()
    }

    #[getter]
    fn config(&self) -> PyViTConfig {
        PyViTConfig { inner: self.config.clone() }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Runs one image given as a flat row-major `H·W·C_in` list. Returns a
    /// dict with `logits`, per-layer `selected` token indices and, in
    /// finetune mode, per-layer `cross_set_mass`.
    #[pyo3(signature = (image, keep_ratio = None, mode = "inference"))]
    fn forward(&self, py: Python<'_>, image: Vec<f64>, keep_ratio: Option<f64>, mode: &str) -> PyResult<Py<PyAny>> {
        let mode = parse_mode(mode)?;
        let s = self.config.image_size;
        let img = Tensor::new(vec![s, s, self.config.channels_in], image).or_raise()?;
        let schedule = keep_ratio
            .map(|k| KeepSchedule::new(k, self.config.num_layers, DEFAULT_NUM_STAGES))
            .transpose()
            .or_raise()?;
        let out = py
            .detach(|| vit_forward(&img, &self.params, &self.config, schedule.as_ref(), mode))
            .or_raise()?;
        let selected: Vec<&[usize]> = out.traces.iter().map(|t| t.partition.selected()).collect();
        let mass: Option<Vec<f64>> = out
            .traces
            .iter()
            .map(|t| t.attention.as_ref().map(|a| cross_set_mass(a, &t.partition)))
            .collect();
        let value = serde_json::json!({
            "logits": out.logits,
            "selected": selected,
            "cross_set_mass": mass,
        });
        from_json(py, value.to_string())
    }

    /// Accuracy and loss terms on a dataset directory written by `gen-data`.
    #[pyo3(signature = (data_dir, keep_ratio, mode = "inference"))]
    fn evaluate(&self, py: Python<'_>, data_dir: PathBuf, keep_ratio: f64, mode: &str) -> PyResult<Py<PyAny>> {
        let mode = parse_mode(mode)?;
        let data = SyntheticDataset::load(&data_dir, self.config.num_classes).or_raise()?;
        let schedule = KeepSchedule::new(keep_ratio, self.config.num_layers, DEFAULT_NUM_STAGES).or_raise()?;
        let report = py
            .detach(|| run_evaluate(&self.params, &self.config, &data, &schedule, mode, HeadReduction::Mean))
            .or_raise()?;
        from_json(py, serde_json::to_string(&report).map_err(json_err)?)
    }

    /// Smoothness and re-selection statistics against the hard-prune baseline.
    fn diagnose(&self, py: Python<'_>, data_dir: PathBuf, keep_ratio: f64) -> PyResult<Py<PyAny>> {
        let data = SyntheticDataset::load(&data_dir, self.config.num_classes).or_raise()?;
        let schedule = KeepSchedule::new(keep_ratio, self.config.num_layers, DEFAULT_NUM_STAGES).or_raise()?;
        let report = py.detach(|| run_diagnose(&self.params, &self.config, &data, &schedule)).or_raise()?;
        from_json(py, serde_json::to_string(&report).map_err(json_err)?)
    }

    fn __repr__(&self) -> String {
        format!("Model({} layers, {} parameters)", self.config.num_layers, self.params.num_scalars())
    }
}

/// Per-layer keep ratios of a stage schedule.
#[pyfunction]
#[pyo3(signature = (keep_ratio, num_layers, num_stages = DEFAULT_NUM_STAGES))]
fn keep_schedule(keep_ratio: f64, num_layers: usize, num_stages: usize) -> PyResult<Vec<f64>> {
    Ok(KeepSchedule::new(keep_ratio, num_layers, num_stages).or_raise()?.ratios().to_vec())
}

/// Top-K selection over image-token scores; returns `(selected, idle)` token indices.
#[pyfunction]
fn select(scores: Vec<f64>, ratio: f64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p = select_tokens(&scores, ratio).or_raise()?;
    Ok((p.selected().to_vec(), p.idle().to_vec()))
}

/// Inter, intra and normalized-cut terms of an attention matrix under a
/// selection (token 0 is always the class token).
#[pyfunction]
fn cut_losses(py: Python<'_>, attention: Vec<Vec<f64>>, selected: Vec<usize>) -> PyResult<Py<PyAny>> {
    let a = matrix(attention)?;
    let p = partition_of(a.rows(), selected)?;
    let (s, i) = (p.selected().to_vec(), p.idle().to_vec());
    let pa = PartitionedAttention::new(a.clone(), p).or_raise()?;
    let value = serde_json::json!({
        "inter": inter_loss(&pa),
        "intra": intra_loss(&pa),
        "ncut": ncut_attention(&pa),
        "cut": graph_cut(&a, &s, &i).or_raise()?,
        "assoc_selected": assoc(&a, &s),
        "assoc_idle": assoc(&a, &i),
        "cross_set_mass": cross_set_mass(&AttentionMap::new(vec![a]).or_raise()?, pa.partition()),
    });
    from_json(py, value.to_string())
}

/// Mean pairwise cosine similarity of the rows.
#[pyfunction]
fn smoothness(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    cosine_smoothness(&matrix(rows)?).or_raise()
}

/// Multiply-accumulate report for one keep ratio.
#[pyfunction]
#[pyo3(signature = (config, keep_ratio, num_stages = DEFAULT_NUM_STAGES))]
fn count_macs(py: Python<'_>, config: PyRef<'_, PyViTConfig>, keep_ratio: f64, num_stages: usize) -> PyResult<Py<PyAny>> {
    let schedule = KeepSchedule::new(keep_ratio, config.inner.num_layers, num_stages).or_raise()?;
    from_json(py, model_macs(&config.inner, &schedule).or_raise()?.to_json())
}

/// Totals over the standard keep ratios, 1.0 down to 0.3.
#[pyfunction]
fn macs_table(py: Python<'_>, config: PyRef<'_, PyViTConfig>) -> PyResult<Py<PyAny>> {
    let rows = macs_sweep(&config.inner, &TABLE_RATIOS, DEFAULT_NUM_STAGES).or_raise()?;
    from_json(py, serde_json::to_string(&rows).map_err(json_err)?)
}

/// Synthetic images (flat row-major lists) and labels.
#[pyfunction]
fn synthetic_dataset(config: PyRef<'_, PyViTConfig>, seed: u64, count: usize) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let d = gen_synthetic_dataset(seed, count, config.inner.num_classes, &config.inner).or_raise()?;
    Ok((d.images.into_iter().map(Tensor::into_data).collect(), d.labels))
}

/// Writes a synthetic dataset directory (`images.tnsr`, `labels.csv`).
#[pyfunction]
fn write_dataset(config: PyRef<'_, PyViTConfig>, seed: u64, count: usize, out: PathBuf) -> PyResult<()> {
    gen_synthetic_dataset(seed, count, config.inner.num_classes, &config.inner).or_raise()?.save(&out).or_raise()
}

/// Trains from a JSON config file, writes the run to `out` and returns the
/// per-epoch metrics.
#[pyfunction]
fn train(py: Python<'_>, config_path: PathBuf, out: PathBuf) -> PyResult<Py<PyAny>> {
    let tc = TrainConfig::load(&config_path).or_raise()?;
    let outcome = py.detach(|| run_train(&tc)).or_raise()?;
    outcome.write(&out, &tc.vit).or_raise()?;
    tc.save(&out.join("config.json")).or_raise()?;
    from_json(py, serde_json::to_string(&outcome.metrics).map_err(json_err)?)
}

/// Finite-difference check of the full objective's gradients.
#[pyfunction]
fn grad_check(py: Python<'_>, config_path: PathBuf, seed: u64) -> PyResult<Py<PyAny>> {
    let tc = TrainConfig::load(&config_path).or_raise()?;
    let report = py.detach(|| run_grad_check(&tc, seed)).or_raise()?;
    from_json(py, serde_json::to_string(&report).map_err(json_err)?)
}

#[pymodule]
fn tokidle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("TokidleError", py.get_type::<TokidleError>())?;
    m.add("ContractError", py.get_type::<ContractError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PyViTConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(keep_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(cut_losses, m)?)?;
    m.add_function(wrap_pyfunction!(smoothness, m)?)?;
    m.add_function(wrap_pyfunction!(count_macs, m)?)?;
    m.add_function(wrap_pyfunction!(macs_table, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
