//! Python module `protoseg_py`: datasets, episodes, the prototypical
//! network and the metric helpers.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use protoseg::attention::AttentionVariant;
use protoseg::data::{self, rng_stream, EpisodeSpec, SegMask, Split, SynthConfig};
use protoseg::experiment::Preset;
use protoseg::metrics::{self, ConfusionMatrix, MetricReport};
use protoseg::numerics::{softmax_rowwise, Tensor};
use protoseg::protohead;
use protoseg::trainer::{self, Checkpoint, EvalConfig, ModelConfig, Stage, TrainConfig, Trainer};

fn py_err(e: protoseg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = protoseg::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn report_dict(r: &MetricReport) -> HashMap<String, f64> {
    MetricReport::FIELDS.iter().zip(r.values()).map(|(k, v)| (k.to_string(), v)).collect()
}

/// Writes a synthetic dataset and returns its `meta.json` as a string.
#[pyfunction]
#[pyo3(signature = (root, count=200, image_size=32, num_classes=9, seed=42))]
fn generate_dataset(root: PathBuf, count: usize, image_size: usize, num_classes: usize, seed: u64) -> PyResult<String> {
    let cfg = SynthConfig {
        count,
        image_size,
        num_classes,
        seed,
        ..SynthConfig::default()
    };
    let meta = data::generate_synthetic_dataset(&root, &cfg).map_err(py_err)?;
    serde_json::to_string(&meta).map_err(|e| py_err(e.into()))
}

/// Cosine-annealed learning rate at scheduler step `step`.
#[pyfunction]
#[pyo3(signature = (step, lr_init=1e-3, lr_min=1e-6, t_max=50))]
fn lr_schedule(step: usize, lr_init: f64, lr_min: f64, t_max: usize) -> f64 {
    trainer::cosine_lr(step, lr_init, lr_min, t_max)
}

/// Row-wise softmax of a list of logit rows.
#[pyfunction]
fn softmax(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let t = Tensor::new(&[rows.len(), width], flat).map_err(py_err)?;
    let out = softmax_rowwise(&t, 1).map_err(py_err)?;
    Ok(out.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect())
}

/// Masked average pooling of flat `(H·W·C)` features under a flat label mask.
#[pyfunction]
#[pyo3(signature = (features, height, width, channels, mask, class_id, epsilon=1e-6))]
fn masked_average_pool(
    features: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
    mask: Vec<u8>,
    class_id: usize,
    epsilon: f64,
) -> PyResult<Vec<f64>> {
    let f = Tensor::new(&[height, width, channels], features).map_err(py_err)?;
    let m = SegMask::new(height, width, mask).map_err(py_err)?;
    protohead::masked_average_pool(&f, &m, class_id, epsilon).map_err(py_err)
}

/// Confusion matrix (rows = ground truth) of two flat label lists.
#[pyfunction]
fn confusion_matrix(prediction: Vec<u8>, ground_truth: Vec<u8>, num_classes: usize) -> PyResult<Vec<Vec<u64>>> {
    let n = prediction.len();
    let p = SegMask::new(1, n, prediction).map_err(py_err)?;
    let g = SegMask::new(1, ground_truth.len(), ground_truth).map_err(py_err)?;
    let cm = metrics::confusion_matrix(&p, &g, num_classes).map_err(py_err)?;
    Ok(cm.counts().chunks(num_classes).map(<[u64]>::to_vec).collect())
}

/// The metric battery of a square confusion matrix.
#[pyfunction]
#[pyo3(signature = (matrix, background_id=0))]
fn compute_metrics(matrix: Vec<Vec<u64>>, background_id: usize) -> PyResult<HashMap<String, f64>> {
    let k = matrix.len();
    let cm = ConfusionMatrix::from_counts(k, matrix.into_iter().flatten().collect()).map_err(py_err)?;
    Ok(report_dict(&metrics::compute_metrics(&cm, background_id).map_err(py_err)?))
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.meta.image_size
    }

    /// Restriction to `train`, `val`, `test` or `all`.
    fn split(&self, split: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.split(parse::<Split>(split)?),
        })
    }

    /// Draws one episode from stream `stream` of `seed`.
    #[pyo3(signature = (n_ways=2, k_shots=5, n_query=1, seed=42, stream=0))]
    fn sample_episode(&self, n_ways: usize, k_shots: usize, n_query: usize, seed: u64, stream: u64) -> PyResult<PyEpisode> {
        let mut rng = rng_stream(seed, stream);
        let spec = EpisodeSpec::new(n_ways, k_shots, n_query);
        Ok(PyEpisode {
            inner: data::sample_episode(&self.inner, &spec, &mut rng).map_err(py_err)?,
        })
    }
}

#[pyclass(name = "Episode", frozen)]
struct PyEpisode {
    inner: data::Episode,
}

#[pymethods]
impl PyEpisode {
    #[getter]
    fn n_ways(&self) -> usize {
        self.inner.n_ways
    }

    #[getter]
    fn k_shots(&self) -> usize {
        self.inner.k_shots
    }

    /// `(dataset class, episode class)` pairs.
    #[getter]
    fn class_map(&self) -> Vec<(usize, usize)> {
        self.inner.class_map.clone()
    }

    #[getter]
    fn support_ids(&self) -> Vec<usize> {
        self.inner.support.iter().map(|s| s.image_id).collect()
    }

    #[getter]
    fn query_ids(&self) -> Vec<usize> {
        self.inner.query.iter().map(|s| s.image_id).collect()
    }

    /// Flat episode-space label lists, one per support image.
    fn support_masks(&self) -> Vec<Vec<u8>> {
        self.inner.support.iter().map(|s| s.mask.labels().to_vec()).collect()
    }

    fn query_masks(&self) -> Vec<Vec<u8>> {
        self.inner.query.iter().map(|s| s.mask.labels().to_vec()).collect()
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Untrained network; `preset` is `desk` or `full`.
    #[new]
    #[pyo3(signature = (preset="desk", seed=42))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let encoder = match preset {
            "desk" => Preset::Desk.encoder(),
            "full" => Preset::Full.encoder(),
            other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
        };
        let model = ModelConfig {
            encoder,
            ..ModelConfig::default()
        };
        let config = TrainConfig {
            episodes: 0,
            seed,
            ..TrainConfig::pretrain()
        };
        let trainer = Trainer::pretrain(&model, &config).map_err(py_err)?;
        Ok(PyModel {
            checkpoint: trainer.checkpoint(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            checkpoint: Checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(py_err)
    }

    #[getter]
    fn stage(&self) -> &'static str {
        match self.checkpoint.stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    #[getter]
    fn attention(&self) -> String {
        self.checkpoint.model.attention_variant.to_string()
    }

    /// Stage 1 on the train split; returns per-episode total losses.
    #[pyo3(signature = (dataset, episodes=50, n_ways=8, k_shots=5, seed=42))]
    fn pretrain(&mut self, py: Python<'_>, dataset: &PyDataset, episodes: usize, n_ways: usize, k_shots: usize, seed: u64) -> PyResult<Vec<f64>> {
        let config = TrainConfig {
            episodes,
            seed,
            episode_spec: EpisodeSpec::new(n_ways, k_shots, 1),
            ..TrainConfig::pretrain()
        };
        let model = self.checkpoint.model.clone();
        let train = dataset.inner.split(Split::Train);
        let (ckpt, losses) = py
            .detach(|| {
                let mut losses = Vec::new();
                let ckpt = trainer::pretrain_stage(&train, &model, &config, |l| {
                    losses.push(l.loss.total);
                    Ok(())
                })?;
                Ok((ckpt, losses))
            })
            .map_err(py_err)?;
        self.checkpoint = ckpt;
        Ok(losses)
    }

    /// Stage 2 on the train split; returns per-episode total losses.
    #[pyo3(signature = (dataset, episodes=50, attention="none", bidirectional=true, n_ways=2, k_shots=5, seed=42))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        episodes: usize,
        attention: &str,
        bidirectional: bool,
        n_ways: usize,
        k_shots: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let mut config = TrainConfig {
            episodes,
            seed,
            attention: parse::<AttentionVariant>(attention)?,
            episode_spec: EpisodeSpec::new(n_ways, k_shots, 1),
            ..TrainConfig::finetune()
        };
        config.loss.bidirectional = bidirectional;
        let start = self.checkpoint.clone();
        let train = dataset.inner.split(Split::Train);
        let (ckpt, losses) = py
            .detach(|| {
                let mut losses = Vec::new();
                let ckpt = trainer::finetune_stage(&start, &train, &config, |l| {
                    losses.push(l.loss.total);
                    Ok(())
                })?;
                Ok((ckpt, losses))
            })
            .map_err(py_err)?;
        self.checkpoint = ckpt;
        Ok(losses)
    }

    /// Query probabilities as `(shape, flat values)`, shape `(n_q, H, W, n+1)`.
    fn predict(&self, episode: &PyEpisode) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let (probs, _) = protohead::predict_episode(&episode.inner, &self.checkpoint.net).map_err(py_err)?;
        Ok((probs.shape().to_vec(), probs.to_vec()))
    }

    /// Mean metrics over test episodes.
    #[pyo3(signature = (dataset, n_ways=2, k_shots=5, episodes=100, seed=42, split="test"))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        n_ways: usize,
        k_shots: usize,
        episodes: usize,
        seed: u64,
        split: &str,
    ) -> PyResult<HashMap<String, f64>> {
        let config = EvalConfig {
            spec: EpisodeSpec::new(n_ways, k_shots, 1),
            episodes,
            seed,
            pooled: false,
        };
        let subset = dataset.inner.split(parse::<Split>(split)?);
        let net = &self.checkpoint.net;
        let result = py.detach(|| trainer::evaluate(net, &subset, &config)).map_err(py_err)?;
        Ok(report_dict(&result.summary.mean))
    }
}

#[pymodule]
fn protoseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(masked_average_pool, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
