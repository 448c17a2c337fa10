use serde::{Deserialize, Serialize};

use super::streams;
use crate::data::{rng_stream, sample_episode, Dataset, EpisodeSpec};
use crate::error::{ensure, Result};
use crate::metrics::{compute_metrics, summarize, ConfusionMatrix, MetricReport, MetricSummary};
use crate::protohead::{argmax_masks, predict_episode, ProtoNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub seed: u64,
    /// Also report metrics of the confusion matrix pooled over all episodes.
    pub pooled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            spec: EpisodeSpec::new(2, 5, 1),
            episodes: 1000,
            seed: 42,
            pooled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode: usize,
    pub classes: Vec<usize>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub summary: MetricSummary,
    pub pooled: Option<MetricReport>,
    pub per_episode: Vec<EpisodeEval>,
}

/// Scores `config.episodes` episodes drawn from a dedicated RNG stream.
/// Metrics are computed per episode in episode label space (background 0)
/// and averaged.
pub fn evaluate(net: &ProtoNet<f32>, dataset: &Dataset, config: &EvalConfig) -> Result<EvalResult> {
    ensure!(config.episodes >= 1, "evaluation needs at least one episode");
    let mut rng = rng_stream(config.seed, streams::EVAL);
    let classes = config.spec.n_ways + 1;
    let mut pooled = ConfusionMatrix::new(classes);
    let mut per_episode = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        let ep = sample_episode(dataset, &config.spec, &mut rng)?;
        let (probs, _) = predict_episode(&ep, net)?;
        let mut cm = ConfusionMatrix::new(classes);
        for (pred, q) in argmax_masks(&probs)?.iter().zip(&ep.query) {
            cm.add(pred, &q.mask)?;
        }
        pooled.merge(&cm)?;
        per_episode.push(EpisodeEval {
            episode,
            classes: ep.class_map.iter().map(|&(c, _)| c).collect(),
            report: compute_metrics(&cm, 0)?,
        });
    }
    let reports: Vec<MetricReport> = per_episode.iter().map(|e| e.report.clone()).collect();
    Ok(EvalResult {
        summary: summarize(&reports)?,
        pooled: if config.pooled {
            Some(compute_metrics(&pooled, 0)?)
        } else {
            None
        },
        per_episode,
    })
}
