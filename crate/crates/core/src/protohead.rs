//! Prototype generation by masked average pooling and dense prediction by
//! temperature-scaled cosine matching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, AttentionParams, AttentionVariant};
use crate::data::{Episode, SegMask};
use crate::encoder::{self, EncoderConfig, EncoderParams, Pass};
use crate::error::{ensure, Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, softmax_rowwise, Real, Tape, Tensor, Var};
use crate::params::{Binding, ParamKind};

/// Norm floor used when normalizing features and prototypes.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoHeadConfig {
    pub epsilon: f64,
    pub temperature: f64,
    pub temperature_learnable: bool,
    pub feature_level: usize,
}

impl Default for ProtoHeadConfig {
    fn default() -> Self {
        ProtoHeadConfig {
            epsilon: 1e-6,
            temperature: 20.0,
            temperature_learnable: false,
            feature_level: 2,
        }
    }
}

impl ProtoHeadConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epsilon > 0.0, "epsilon must be positive, got {}", self.epsilon);
        ensure!(self.temperature > 0.0, "temperature must be positive, got {}", self.temperature);
        ensure!(
            (2..=encoder::NUM_STAGES).contains(&self.feature_level),
            "feature level must be in 2..=5, got {}",
            self.feature_level
        );
        Ok(())
    }
}

/// One embedding per episode class, rows ordered like `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    pub classes: Vec<usize>,
    /// `(classes.len(), C)`.
    pub prototypes: Tensor<T>,
}

impl<T: Real> PrototypeSet<T> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&[T]> {
        let row = self.classes.iter().position(|&c| c == class)?;
        let c = self.prototypes.last_dim();
        Some(&self.prototypes.data()[row * c..(row + 1) * c])
    }
}

fn feature_grid<T: Real>(features: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match features.rank() {
        3 => Ok((1, features.shape()[0], features.shape()[1], features.shape()[2])),
        4 => features.dims4(),
        r => Err(Error::Contract(format!("features must be rank 3 or 4, got rank {r}"))),
    }
}

/// `Σ_{mask = class} f / (count + ε)` per channel.
///
/// The mask is nearest-neighbor resampled to the feature grid when sizes
/// differ. `features` is `(H, W, C)` or `(1, H, W, C)`.
pub fn masked_average_pool<T: Real>(features: &Tensor<T>, mask: &SegMask, class_id: usize, epsilon: f64) -> Result<Vec<T>> {
    let (b, h, w, c) = feature_grid(features)?;
    ensure!(b == 1, "masked_average_pool takes a single feature map, got batch {}", b);
    let mask = mask.resize_nearest(h, w);
    let count = mask.count(class_id);
    if count == 0 {
        return Err(Error::EmptyClass { class: class_id });
    }
    let mut sum = vec![T::zero(); c];
    for (pix, &label) in mask.labels().iter().enumerate() {
        if label as usize == class_id {
            for (s, &f) in sum.iter_mut().zip(&features.data()[pix * c..(pix + 1) * c]) {
                *s += f;
            }
        }
    }
    let denom = T::of(count as f64 + epsilon);
    Ok(sum.into_iter().map(|s| s / denom).collect())
}

/// Constant `(M, B·h·w)` matrix turning flattened features into prototypes.
///
/// Row `m` averages, over the images containing `classes[m]`, each image's
/// masked mean. With `lenient` a class absent from every mask yields a zero
/// row instead of an error.
pub fn pooling_weights<T: Real>(masks: &[SegMask], classes: &[usize], epsilon: f64, lenient: bool) -> Result<Tensor<T>> {
    ensure!(!masks.is_empty(), "prototype pooling needs at least one mask");
    let pixels = masks[0].len();
    ensure!(
        masks.iter().all(|m| m.len() == pixels),
        "all masks must share one size"
    );
    let tokens = masks.len() * pixels;
    let mut weights = vec![T::zero(); classes.len() * tokens];
    for (row, &class) in classes.iter().enumerate() {
        let holders: Vec<(usize, usize)> = masks
            .iter()
            .enumerate()
            .map(|(b, m)| (b, m.count(class)))
            .filter(|&(_, n)| n > 0)
            .collect();
        if holders.is_empty() {
            if lenient {
                continue;
            }
            return Err(Error::EmptyClass { class });
        }
        let share = 1.0 / holders.len() as f64;
        for (b, n) in holders {
            let weight = T::of(share / (n as f64 + epsilon));
            let base = row * tokens + b * pixels;
            for (pix, &label) in masks[b].labels().iter().enumerate() {
                if label as usize == class {
                    weights[base + pix] = weight;
                }
            }
        }
    }
    Tensor::new(&[classes.len(), tokens], weights)
}

fn pooled_prototypes_var<T: Real>(
    tape: &Tape<T>,
    features: Var,
    masks: &[SegMask],
    classes: &[usize],
    epsilon: f64,
    lenient: bool,
) -> Result<Var> {
    let (b, h, w, c) = tape.value(features).dims4()?;
    ensure!(
        masks.len() == b,
        "{} masks for {} feature maps",
        masks.len(),
        b
    );
    let resized: Vec<SegMask> = masks.iter().map(|m| m.resize_nearest(h, w)).collect();
    let weights = tape.constant(pooling_weights(&resized, classes, epsilon, lenient)?);
    let tokens = tape.reshape(features, &[b * h * w, c])?;
    tape.matmul(weights, tokens, false, false)
}

/// Prototypes `(M, C)` from `(B, h, w, C)` support features.
pub fn build_prototypes_var<T: Real>(
    tape: &Tape<T>,
    support_features: Var,
    support_masks: &[SegMask],
    classes: &[usize],
    config: &ProtoHeadConfig,
) -> Result<Var> {
    pooled_prototypes_var(tape, support_features, support_masks, classes, config.epsilon, false)
}

/// Prototype set from a `(B, h, w, C)` batch of support feature maps.
pub fn build_prototypes<T: Real>(
    support_features: &Tensor<T>,
    support_masks: &[SegMask],
    episode_classes: &[usize],
    config: &ProtoHeadConfig,
) -> Result<PrototypeSet<T>> {
    config.validate()?;
    let tape = Tape::no_grad();
    let f = tape.constant(support_features.clone());
    let p = build_prototypes_var(&tape, f, support_masks, episode_classes, config)?;
    let prototypes = tape.value(p);
    if !prototypes.all_finite() {
        return Err(Error::NonFinite("prototype".into()));
    }
    Ok(PrototypeSet {
        classes: episode_classes.to_vec(),
        prototypes,
    })
}

/// Per-pixel class probabilities `(B, h, w, M)`:
/// `softmax_c(α · cos(f, p_c))`.
pub fn match_prototypes_var<T: Real>(tape: &Tape<T>, features: Var, prototypes: Var, alpha: Var) -> Result<Var> {
    let (b, h, w, c) = tape.value(features).dims4()?;
    let (m, pc) = tape.value(prototypes).dims2()?;
    ensure!(pc == c, "prototype dim {} != feature channels {}", pc, c);
    let tokens = tape.reshape(features, &[b * h * w, c])?;
    let f = tape.l2_normalize(tokens, T::of(MIN_NORM));
    let p = tape.l2_normalize(prototypes, T::of(MIN_NORM));
    let cos = tape.matmul(f, p, false, true)?;
    let logits = tape.scale_by(cos, alpha)?;
    let probs = tape.softmax(logits, 1)?;
    tape.reshape(probs, &[b, h, w, m])
}

pub fn match_prototypes<T: Real>(
    query_features: &Tensor<T>,
    prototypes: &PrototypeSet<T>,
    config: &ProtoHeadConfig,
) -> Result<Tensor<T>> {
    config.validate()?;
    let (b, h, w, c) = feature_grid(query_features)?;
    let (m, pc) = prototypes.prototypes.dims2()?;
    ensure!(pc == c, "prototype dim {} != feature channels {}", pc, c);
    let min = T::of(MIN_NORM);
    let f = l2_normalize_rows(&query_features.reshape(&[b * h * w, c])?, min);
    let p = l2_normalize_rows(&prototypes.prototypes, min);
    let alpha = T::of(config.temperature);
    let logits = matmul(&f, &p, false, true)?.map(|v| v * alpha);
    softmax_rowwise(&logits, 1)?.reshape(&[b, h, w, m])
}

/// Argmax over the last axis of `(B, H, W, M)` probabilities; ties go to
/// the lowest class index.
pub fn argmax_masks<T: Real>(probabilities: &Tensor<T>) -> Result<Vec<SegMask>> {
    let (b, h, w, m) = probabilities.dims4()?;
    ensure!(m <= 256, "too many classes for 8-bit masks: {}", m);
    let data = probabilities.data();
    (0..b)
        .map(|bi| {
            let labels = (0..h * w)
                .map(|pix| {
                    let row = &data[(bi * h * w + pix) * m..(bi * h * w + pix + 1) * m];
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            SegMask::new(h, w, labels)
        })
        .collect()
}

/// Encoder plus prototypical head.
///
/// The head store holds the attention projections and, when the temperature
/// is learnable, a one-element `temperature` entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoNet<T> {
    pub encoder: EncoderParams<T>,
    pub head: AttentionParams<T>,
    pub attention_config: AttentionConfig,
    pub config: ProtoHeadConfig,
}

impl<T: Real> ProtoNet<T> {
    pub fn init(
        encoder_config: EncoderConfig,
        variant: AttentionVariant,
        attention_config: AttentionConfig,
        config: ProtoHeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(encoder_config, rng)?;
        let head = Self::init_head(encoder.config.pyramid_channels, variant, &attention_config, &config, rng)?;
        Ok(ProtoNet {
            encoder,
            head,
            attention_config,
            config,
        })
    }

    /// Fresh head parameters for `channels`-wide features.
    pub fn init_head(
        channels: usize,
        variant: AttentionVariant,
        attention_config: &AttentionConfig,
        config: &ProtoHeadConfig,
        rng: &mut impl Rng,
    ) -> Result<AttentionParams<T>> {
        let mut head = AttentionParams::init(variant, channels, attention_config, rng)?;
        if config.temperature_learnable {
            head.store.insert(
                "temperature",
                Tensor::full(&[1], T::of(config.temperature)),
                ParamKind::Trainable,
            );
        }
        Ok(head)
    }

    pub fn cast<U: Real>(&self) -> ProtoNet<U> {
        ProtoNet {
            encoder: self.encoder.cast(),
            head: self.head.cast(),
            attention_config: self.attention_config.clone(),
            config: self.config.clone(),
        }
    }

    /// Current temperature as a scalar variable.
    pub fn temperature_var(&self, head: &Binding<T>) -> Result<Var> {
        if head.store().contains("temperature") {
            head.var("temperature")
        } else {
            Ok(head.tape().constant(Tensor::full(&[1], T::of(self.config.temperature))))
        }
    }
}

/// Variables produced by one forward pass over an episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeForward {
    /// `(n·k, h, w, C)` after attention.
    pub support_features: Var,
    /// `(n_q, h, w, C)` after attention.
    pub query_features: Var,
    /// `(n+1, C)`.
    pub prototypes: Var,
    /// `(n_q, h, w, n+1)` at feature resolution.
    pub query_probs_low: Var,
    /// `(n_q, H, W, n+1)` at image resolution.
    pub query_probs: Var,
    pub temperature: Var,
}

/// Encoder (one batch over support and query) → attention → prototypes →
/// matching → bilinear resize to image resolution.
#[allow(clippy::too_many_arguments)]
pub fn forward_episode_var<T: Real>(
    enc: &Binding<T>,
    head: &Binding<T>,
    net: &ProtoNet<T>,
    support_images: &Tensor<T>,
    query_images: &Tensor<T>,
    support_masks: &[SegMask],
    classes: &[usize],
    pass: Pass,
) -> Result<EpisodeForward> {
    let tape = enc.tape();
    let (ns, hi, wi, _) = support_images.dims4()?;
    let (nq, qh, qw, _) = query_images.dims4()?;
    ensure!((qh, qw) == (hi, wi), "support and query images differ in size");
    ensure!(support_masks.len() == ns, "{} support masks for {} images", support_masks.len(), ns);
    let mut data = support_images.to_vec();
    data.extend_from_slice(query_images.data());
    let mut shape = support_images.shape().to_vec();
    shape[0] = ns + nq;
    let images = tape.constant(Tensor::new(&shape, data)?);
    let features = encoder::extract_features_var(enc, &net.encoder.config, images, net.config.feature_level, pass)?;
    let support = tape.slice_rows(features, 0, ns)?;
    let query = tape.slice_rows(features, ns, ns + nq)?;
    let (support, query) = attention::apply_var(head, &net.head, &net.attention_config, support, query)?;
    let prototypes = build_prototypes_var(tape, support, support_masks, classes, &net.config)?;
    let temperature = net.temperature_var(head)?;
    let query_probs_low = match_prototypes_var(tape, query, prototypes, temperature)?;
    let query_probs = tape.resize_bilinear(query_probs_low, hi, wi)?;
    Ok(EpisodeForward {
        support_features: support,
        query_features: query,
        prototypes,
        query_probs_low,
        query_probs,
        temperature,
    })
}

/// Reversed pass: prototypes pooled from query features under the query's
/// predicted mask segment the support images. Classes the prediction misses
/// get a zero prototype. Returns `(n·k, H, W, n+1)` probabilities.
pub fn reverse_support_probs_var<T: Real>(
    tape: &Tape<T>,
    forward: &EpisodeForward,
    classes: &[usize],
    image_size: (usize, usize),
    epsilon: f64,
) -> Result<Var> {
    let predicted = argmax_masks(&tape.value(forward.query_probs_low))?;
    let predicted: Vec<SegMask> = predicted
        .iter()
        .map(|m| m.relabel(&classes.iter().enumerate().map(|(i, &c)| (i as u8, c as u8)).collect::<Vec<_>>()))
        .collect();
    let prototypes = pooled_prototypes_var(tape, forward.query_features, &predicted, classes, epsilon, true)?;
    let probs = match_prototypes_var(tape, forward.support_features, prototypes, forward.temperature)?;
    tape.resize_bilinear(probs, image_size.0, image_size.1)
}

/// Evaluation-mode prediction for an episode: query probabilities
/// `(n_q, H, W, n+1)` and the support prototypes.
pub fn predict_episode<T: Real>(episode: &Episode, net: &ProtoNet<T>) -> Result<(Tensor<T>, PrototypeSet<T>)> {
    let tape = Tape::no_grad();
    let enc = Binding::new(&tape, &net.encoder.store, false);
    let head = Binding::new(&tape, &net.head.store, false);
    let classes = episode.classes();
    let out = forward_episode_var(
        &enc,
        &head,
        net,
        &episode.support_batch(),
        &episode.query_batch(),
        &episode.support_masks(),
        &classes,
        Pass::eval(),
    )?;
    let probs = tape.value(out.query_probs);
    if !probs.all_finite() {
        return Err(Error::NonFinite("query probabilities".into()));
    }
    Ok((
        probs,
        PrototypeSet {
            classes,
            prototypes: tape.value(out.prototypes),
        },
    ))
}
