use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::optim::{clip_global_norm, AdamW, GroupGrads};
use super::{config_digest, streams, EpisodeLog, ModelConfig, Stage, TrainConfig};
use crate::attention::AttentionVariant;
use crate::data::{rng_stream, sample_episode, Dataset, Episode, RngState};
use crate::encoder::Pass;
use crate::error::{Error, Result};
use crate::losses::{nll_var, pretrain_loss_var, regularizer_var, LossBreakdown, LossConfig};
use crate::numerics::{Tape, Tensor};
use crate::params::Binding;
use crate::protohead::{forward_episode_var, reverse_support_probs_var, ProtoNet};

/// Loss values, parameter gradients and batch-norm statistics of one episode.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: LossBreakdown,
    pub grads: GroupGrads<f32>,
    pub buffers: Vec<(String, Tensor<f32>)>,
}

fn scalar(tape: &Tape<f32>, v: crate::numerics::Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// Forward and backward pass for one episode.
///
/// Pretraining scores query predictions with the combined CE/Dice/focal
/// objective and keeps the head frozen. Fine-tuning uses the query loss,
/// optionally the reversed support loss, and the head regularizer.
pub fn episode_gradients(net: &ProtoNet<f32>, episode: &Episode, stage: Stage, loss: &LossConfig) -> Result<StepGradients> {
    let tape = Tape::new();
    let enc = Binding::new(&tape, &net.encoder.store, true);
    let head = Binding::new(&tape, &net.head.store, stage == Stage::Finetune);
    let pass = Pass {
        train: true,
        norm_mode: net.encoder.config.norm_mode,
    };
    let classes = episode.classes();
    let query_masks = episode.query_masks();
    let support_masks = episode.support_masks();
    let fwd = forward_episode_var(
        &enc,
        &head,
        net,
        &episode.support_batch(),
        &episode.query_batch(),
        &support_masks,
        &classes,
        pass,
    )?;
    let (root, breakdown) = match stage {
        Stage::Pretrain => {
            let t = pretrain_loss_var(&tape, fwd.query_probs, &query_masks, loss)?;
            let b = LossBreakdown {
                ce: scalar(&tape, t.ce),
                dice: scalar(&tape, t.dice),
                focal: scalar(&tape, t.focal),
                total: scalar(&tape, t.total),
                ..LossBreakdown::default()
            };
            (t.total, b)
        }
        Stage::Finetune => {
            let q = nll_var(&tape, fwd.query_probs, &query_masks)?;
            let mut b = LossBreakdown {
                query: scalar(&tape, q),
                ..LossBreakdown::default()
            };
            let mut proto = q;
            if loss.bidirectional {
                let probs = reverse_support_probs_var(&tape, &fwd, &classes, episode.image_size(), net.config.epsilon)?;
                let s = nll_var(&tape, probs, &support_masks)?;
                b.support = scalar(&tape, s);
                proto = tape.add(q, s)?;
            }
            b.proto = scalar(&tape, proto);
            let total = match regularizer_var(&head)? {
                Some(reg) => {
                    b.reg = scalar(&tape, reg);
                    tape.add(proto, tape.scale(reg, loss.reg_weight as f32))?
                }
                None => proto,
            };
            b.total = scalar(&tape, total);
            (total, b)
        }
    };
    if !breakdown.all_finite() {
        let ids: Vec<usize> = episode
            .support
            .iter()
            .map(|s| s.image_id)
            .chain(episode.query.iter().map(|q| q.image_id))
            .collect();
        return Err(Error::NonFinite(format!(
            "loss {:?}; episode classes {:?}, image ids {:?}",
            breakdown, episode.class_map, ids
        )));
    }
    let g = tape.backward(root)?;
    let mut grads = BTreeMap::new();
    grads.insert("encoder".to_string(), enc.gradients(&g));
    if stage == Stage::Finetune {
        let hg = head.gradients(&g);
        if !hg.is_empty() {
            grads.insert("head".to_string(), hg);
        }
    }
    Ok(StepGradients {
        loss: breakdown,
        grads,
        buffers: enc.take_buffer_updates(),
    })
}

fn average(batch: Vec<StepGradients>) -> StepGradients {
    let n = batch.len() as f32;
    let mut iter = batch.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for next in iter {
        for (group, grads) in next.grads {
            let slot = acc.grads.entry(group).or_default();
            for (name, g) in grads {
                match slot.get_mut(&name) {
                    Some(a) => *a = a.zip_map(&g, |x, y| x + y).expect("same parameter shape"),
                    None => {
                        slot.insert(name, g);
                    }
                }
            }
        }
        let l = &mut acc.loss;
        let m = next.loss;
        l.query += m.query;
        l.support += m.support;
        l.proto += m.proto;
        l.ce += m.ce;
        l.dice += m.dice;
        l.focal += m.focal;
        l.reg += m.reg;
        l.total += m.total;
        acc.buffers = next.buffers;
    }
    if n > 1.0 {
        for g in acc.grads.values_mut().flat_map(|g| g.values_mut()) {
            *g = g.map(|v| v / n);
        }
        let l = &mut acc.loss;
        let n = n as f64;
        for v in [
            &mut l.query,
            &mut l.support,
            &mut l.proto,
            &mut l.ce,
            &mut l.dice,
            &mut l.focal,
            &mut l.reg,
            &mut l.total,
        ] {
            *v /= n;
        }
    }
    acc
}

/// Owns parameters, optimizer state and the episode stream of one stage.
pub struct Trainer {
    pub net: ProtoNet<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub episode: usize,
    pub digest: String,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    parent: Option<&'a str>,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

impl Trainer {
    /// Stage 1: fresh encoder, attention-free frozen head.
    pub fn pretrain(model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = model.clone();
        model.attention_variant = AttentionVariant::None;
        model.validate()?;
        let mut init = rng_stream(config.seed, streams::INIT);
        let net = ProtoNet::init(
            model.encoder.clone(),
            AttentionVariant::None,
            model.attention.clone(),
            model.head.clone(),
            &mut init,
        )?;
        let digest = config_digest(&DigestInput {
            parent: None,
            model: &model,
            train: config,
        })?;
        Ok(Trainer {
            net,
            optimizer: AdamW::new(config.adamw()),
            rng: rng_stream(config.seed, streams::PRETRAIN),
            config: TrainConfig {
                stage: Stage::Pretrain,
                ..config.clone()
            },
            model,
            episode: 0,
            digest,
        })
    }

    /// Stage 2: pretrained encoder, fresh head of the configured variant,
    /// fresh optimizer.
    pub fn finetune(checkpoint: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = checkpoint.model.clone();
        model.attention_variant = config.attention;
        model.validate()?;
        let mut init = rng_stream(config.seed, streams::HEAD_INIT);
        let mut net = checkpoint.net.clone();
        net.head = ProtoNet::init_head(
            net.encoder.config.pyramid_channels,
            config.attention,
            &model.attention,
            &model.head,
            &mut init,
        )?;
        net.attention_config = model.attention.clone();
        let digest = config_digest(&DigestInput {
            parent: Some(&checkpoint.config_digest),
            model: &model,
            train: config,
        })?;
        Ok(Trainer {
            net,
            optimizer: AdamW::new(config.adamw()),
            rng: rng_stream(config.seed, streams::FINETUNE),
            config: TrainConfig {
                stage: Stage::Finetune,
                ..config.clone()
            },
            model,
            episode: 0,
            digest,
        })
    }

    /// One optimizer update from the averaged gradients of `episodes`.
    pub fn update(&mut self, episodes: &[Episode]) -> Result<EpisodeLog> {
        let batch = episodes
            .iter()
            .map(|e| episode_gradients(&self.net, e, self.config.stage, &self.config.loss))
            .collect::<Result<Vec<_>>>()?;
        let mut step = average(batch);
        let (grad_norm, clipped_norm) = clip_global_norm(&mut step.grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm at episode {}",
                self.episode
            )));
        }
        let lr = self.config.lr_at(self.episode);
        let net = &mut self.net;
        self.optimizer.update(
            &mut [("encoder", &mut net.encoder.store), ("head", &mut net.head.store)],
            &step.grads,
            lr,
        )?;
        for (name, value) in step.buffers {
            net.encoder.store.set(&name, value)?;
        }
        let first = self.episode;
        self.episode += episodes.len();
        Ok(EpisodeLog {
            stage: self.config.stage,
            episode: first,
            classes: episodes
                .first()
                .map(|e| e.class_map.iter().map(|&(c, _)| c).collect())
                .unwrap_or_default(),
            loss: step.loss,
            lr,
            grad_norm,
            clipped_norm,
        })
    }

    /// Samples and trains on the next batch of episodes.
    pub fn next(&mut self, dataset: &Dataset) -> Result<EpisodeLog> {
        let n = self
            .config
            .batch_episodes
            .min(self.config.episodes.saturating_sub(self.episode))
            .max(1);
        let episodes = (0..n)
            .map(|_| sample_episode(dataset, &self.config.episode_spec, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        self.update(&episodes)
    }

    /// Trains until `config.episodes` episodes have been consumed.
    pub fn run(&mut self, dataset: &Dataset, mut on_log: impl FnMut(&EpisodeLog) -> Result<()>) -> Result<()> {
        while self.episode < self.config.episodes {
            let log = self.next(dataset)?;
            on_log(&log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.config.stage,
            episode: self.episode,
            config_digest: self.digest.clone(),
            seed: self.config.seed,
            model: self.model.clone(),
            train: Some(self.config.clone()),
            net: self.net.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: Some(RngState::capture(&self.rng)),
        }
    }
}

/// Stage 1 over `config.episodes` episodes of `dataset`.
pub fn pretrain_stage(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    on_log: impl FnMut(&EpisodeLog) -> Result<()>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::pretrain(model, config)?;
    trainer.run(dataset, on_log)?;
    Ok(trainer.checkpoint())
}

/// Stage 2 starting from a pretraining checkpoint.
pub fn finetune_stage(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    config: &TrainConfig,
    on_log: impl FnMut(&EpisodeLog) -> Result<()>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::finetune(checkpoint, config)?;
    trainer.run(dataset, on_log)?;
    Ok(trainer.checkpoint())
}
