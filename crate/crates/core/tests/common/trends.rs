//! Shared-pretrain protocol for the comparative experiments.
//!
//! One pretraining checkpoint per seed is reused by every fine-tuning
//! variant of that seed; all variants are then scored on the same
//! evaluation episode stream.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use protoseg::attention::AttentionVariant;
use protoseg::data::{EpisodeSpec, Split};
use protoseg::metrics::MetricReport;
use protoseg::trainer::{evaluate, finetune_stage, pretrain_stage, Checkpoint, EvalConfig, ModelConfig, TrainConfig};

use super::shared_dataset;

pub const SEEDS: [u64; 3] = [42, 43, 44];
pub const EVAL_EPISODES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub attention: AttentionVariant,
    pub bidirectional: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        attention: AttentionVariant::None,
        bidirectional: true,
    };
}

/// Pretraining checkpoint for one seed, memoized.
pub fn pretrained(seed: u64) -> Checkpoint {
    static CACHE: OnceLock<Mutex<BTreeMap<u64, Checkpoint>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(c) = cache.lock().unwrap().get(&seed) {
        return c.clone();
    }
    let config = TrainConfig {
        seed,
        ..TrainConfig::pretrain()
    };
    let train = shared_dataset().split(Split::Train);
    let ckpt = pretrain_stage(&train, &ModelConfig::default(), &config, |_| Ok(())).expect("pretraining");
    cache.lock().unwrap().insert(seed, ckpt.clone());
    ckpt
}

type VariantKey = (u64, &'static str, bool);

/// Fine-tuned checkpoint for one seed and variant, memoized.
pub fn finetuned(seed: u64, variant: Variant) -> Checkpoint {
    static CACHE: OnceLock<Mutex<BTreeMap<VariantKey, Checkpoint>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (seed, variant.attention.as_str(), variant.bidirectional);
    if let Some(c) = cache.lock().unwrap().get(&key) {
        return c.clone();
    }
    let mut config = TrainConfig {
        seed,
        attention: variant.attention,
        ..TrainConfig::finetune()
    };
    config.loss.bidirectional = variant.bidirectional;
    let train = shared_dataset().split(Split::Train);
    let ckpt = finetune_stage(&pretrained(seed), &train, &config, |_| Ok(())).expect("fine-tuning");
    cache.lock().unwrap().insert(key, ckpt.clone());
    ckpt
}

/// Mean metrics over `EVAL_EPISODES` test episodes.
pub fn score(ckpt: &Checkpoint, n_ways: usize, k_shots: usize, seed: u64) -> MetricReport {
    let config = EvalConfig {
        spec: EpisodeSpec::new(n_ways, k_shots, 1),
        episodes: EVAL_EPISODES,
        seed,
        pooled: false,
    };
    let test = shared_dataset().split(Split::Test);
    evaluate(&ckpt.net, &test, &config).expect("evaluation").summary.mean
}

/// Average of `metric` over all seeds.
pub fn seed_mean(variant: Variant, n_ways: usize, k_shots: usize, metric: fn(&MetricReport) -> f64) -> f64 {
    SEEDS
        .iter()
        .map(|&s| metric(&score(&finetuned(s, variant), n_ways, k_shots, s)))
        .sum::<f64>()
        / SEEDS.len() as f64
}
