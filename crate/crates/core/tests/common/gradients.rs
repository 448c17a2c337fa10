//! Finite-difference cases covering convolutions, the encoder, the
//! attention heads and every loss term. All cases run in f64 with central
//! differences of step 1e-5 and a relative tolerance of 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use protoseg::attention::{
    cross_attention_var, local_self_attention_var, self_attention_var, AttentionConfig, AttentionParams,
    AttentionVariant,
};
use protoseg::data::SegMask;
use protoseg::encoder::{
    extract_features_var, inception_sep_conv_var, init_block, BlockConfig, EncoderConfig, EncoderParams, NormMode, Pass,
};
use protoseg::losses::{dice_loss_var, focal_loss_var, nll_var, pretrain_loss_var, regularizer_var, LossConfig};
use protoseg::numerics::{GradCheck, GradientReport};
use protoseg::params::{Binding, ParamKind, ParamStore};
use protoseg::protohead::{forward_episode_var, reverse_support_probs_var, ProtoHeadConfig, ProtoNet};
use protoseg::{Result, Tape, Tensor, Var};

pub struct GradCase {
    pub name: &'static str,
    pub report: Result<GradientReport>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `mean(x ⊙ r)` with fixed, non-symmetric weights `r`, so no coordinate's
/// gradient cancels by symmetry.
fn readout(tape: &Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let n = shape.iter().product::<usize>() as f64;
    let r = Tensor::from_fn(&shape, |i| (0.37 * i as f64 + 0.1).sin() / n.sqrt());
    let w = tape.constant(r);
    Ok(tape.sum(tape.mul(x, w)?))
}

/// Replaces zero-initialized normalization shifts with small random values.
/// At exactly zero shift, pixels whose receptive field is all zero sit on
/// the ReLU kink, where finite differences are one-sided.
fn jitter_shifts(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .trainable()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".beta") || n.ends_with(".bias"))
        .collect();
    for name in names {
        let shape = store.get(&name).expect("bound").shape().to_vec();
        store.set(&name, normal(rng, &shape, 0.1)).expect("same shape");
    }
}

fn train_pass(norm_mode: NormMode) -> Pass {
    Pass { train: true, norm_mode }
}

fn full() -> GradCheck {
    GradCheck::default()
}

fn sampled(per_input: usize, seed: u64) -> GradCheck {
    GradCheck::sampled(per_input, seed)
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        stage_channels: [3, 4, 5, 6, 6],
        pyramid_channels: 4,
        ..EncoderConfig::desk()
    }
}

/// Masks with every one of `m` labels present in each image.
fn label_masks(batch: usize, side: usize, m: usize) -> Vec<SegMask> {
    (0..batch)
        .map(|b| SegMask::from_fn(side, side, |i, j| ((i * 3 + j * 5 + b) % m) as u8))
        .collect()
}

/// Softmax probabilities `(b, side, side, m)` from flat logits.
fn probabilities(tape: &Tape<f64>, logits: Var, b: usize, side: usize, m: usize) -> Result<Var> {
    let p = tape.softmax(logits, 1)?;
    tape.reshape(p, &[b, side, side, m])
}

fn sepconv_case() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        normal(&mut rng, &[2, 5, 5, 3], 1.0),
        normal(&mut rng, &[3, 3, 3], 0.5),
        normal(&mut rng, &[1, 1, 3, 4], 0.5),
    ];
    GradCase {
        name: "sepconv2d",
        report: full().run(|t, v| readout(t, t.sepconv2d(v[0], v[1], v[2])?), &inputs),
    }
}

fn inception_case(name: &'static str, norm_mode: NormMode) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = BlockConfig::new(3, 7).expect("block config");
    let mut store = ParamStore::new();
    init_block(&mut store, "block", &cfg, &mut rng);
    jitter_shifts(&mut store, &mut rng);
    store.insert("x", normal(&mut rng, &[2, 6, 6, 3], 1.0), ParamKind::Trainable);
    let report = full().run_params(
        |bind| {
            let y = inception_sep_conv_var(bind, "block", &cfg, bind.var("x")?, train_pass(norm_mode))?;
            readout(bind.tape(), y)
        },
        &store,
    );
    GradCase { name, report }
}

fn encoder_case() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = EncoderParams::<f64>::init(EncoderConfig::desk(), &mut rng).expect("encoder");
    let mut store = params.store.clone();
    jitter_shifts(&mut store, &mut rng);
    store.insert("image", normal(&mut rng, &[2, 32, 32, 1], 1.0), ParamKind::Trainable);
    let config = params.config.clone();
    let report = sampled(3, 13).run_params(
        |bind| {
            let y = extract_features_var(bind, &config, bind.var("image")?, 2, train_pass(NormMode::Running))?;
            readout(bind.tape(), y)
        },
        &store,
    );
    GradCase {
        name: "encoder (desk preset, 32x32, P2 features)",
        report,
    }
}

fn attention_store(variant: AttentionVariant, config: &AttentionConfig, rng: &mut ChaCha8Rng) -> AttentionParams<f64> {
    let mut p = AttentionParams::<f64>::init(variant, 4, config, rng).expect("attention params");
    let shape = p.store.get("wo").expect("wo").shape().to_vec();
    p.store.set("wo", normal(rng, &shape, 0.5)).expect("wo");
    p.store.insert("x", normal(rng, &[2, 3, 3, 4], 1.0), ParamKind::Trainable);
    p
}

fn attention_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let projected = AttentionConfig {
        d_k: Some(3),
        cross_projections: true,
        ..AttentionConfig::default()
    };
    let local = AttentionConfig {
        d_k: Some(3),
        window: 3,
        ..AttentionConfig::default()
    };
    let mut cases = Vec::new();

    let sa = attention_store(AttentionVariant::Sa, &projected, &mut rng);
    cases.push(GradCase {
        name: "self-attention",
        report: full().run_params(
            |b| readout(b.tape(), self_attention_var(b, b.var("x")?, sa.d_k, &projected)?),
            &sa.store,
        ),
    });

    let lsa = attention_store(AttentionVariant::Lsa, &local, &mut rng);
    cases.push(GradCase {
        name: "local self-attention",
        report: full().run_params(
            |b| readout(b.tape(), local_self_attention_var(b, b.var("x")?, lsa.d_k, &local)?),
            &lsa.store,
        ),
    });

    for (name, cfg) in [
        ("cross-attention (projected)", projected.clone()),
        ("cross-attention (direct)", AttentionConfig::default()),
    ] {
        let mut ca = attention_store(AttentionVariant::Ca, &cfg, &mut rng);
        ca.store.insert("support", normal(&mut rng, &[3, 2, 2, 4], 1.0), ParamKind::Trainable);
        let report = full().run_params(
            |b| {
                let y = cross_attention_var(b, b.var("x")?, b.var("support")?, ca.d_k, &cfg)?;
                readout(b.tape(), y)
            },
            &ca.store,
        );
        cases.push(GradCase { name, report });
    }
    cases
}

fn loss_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (b, side, m) = (2, 4, 3);
    let logits = [normal(&mut rng, &[b * side * side, m], 1.5)];
    let masks = label_masks(b, side, m);
    let cfg = LossConfig::default();
    let mut cases = vec![
        GradCase {
            name: "pixel negative log-likelihood",
            report: full().run(|t, v| nll_var(t, probabilities(t, v[0], b, side, m)?, &masks), &logits),
        },
        GradCase {
            name: "dice loss",
            report: full().run(
                |t, v| dice_loss_var(t, probabilities(t, v[0], b, side, m)?, &masks, cfg.dice_smooth),
                &logits,
            ),
        },
        GradCase {
            name: "focal loss",
            report: full().run(
                |t, v| focal_loss_var(t, probabilities(t, v[0], b, side, m)?, &masks, cfg.focal_gamma),
                &logits,
            ),
        },
        GradCase {
            name: "pretraining objective",
            report: full().run(
                |t, v| Ok(pretrain_loss_var(t, probabilities(t, v[0], b, side, m)?, &masks, &cfg)?.total),
                &logits,
            ),
        },
    ];

    let mut store = ParamStore::new();
    store.insert("wq", normal(&mut rng, &[4, 3], 1.0), ParamKind::Trainable);
    store.insert("wo", normal(&mut rng, &[3, 4], 1.0), ParamKind::Trainable);
    cases.push(GradCase {
        name: "head regularizer",
        report: full().run_params(|bind| Ok(regularizer_var(bind)?.expect("trainable entries")), &store),
    });
    cases.extend(finetune_objective_cases());
    cases
}

/// A fixed 2-way 2-shot episode of 16×16 images for the full objective.
struct TinyEpisode {
    net: ProtoNet<f64>,
    support: Tensor<f64>,
    query: Tensor<f64>,
    support_masks: Vec<SegMask>,
    query_masks: Vec<SegMask>,
}

fn tiny_episode() -> TinyEpisode {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let head = ProtoHeadConfig {
        temperature_learnable: true,
        temperature: 5.0,
        ..ProtoHeadConfig::default()
    };
    let attention = AttentionConfig {
        d_k: Some(3),
        ..AttentionConfig::default()
    };
    let mut net = ProtoNet::<f64>::init(small_encoder(), AttentionVariant::Sa, attention, head, &mut rng).expect("net");
    net.head.store.set("wo", normal(&mut rng, &[3, 4], 0.5)).expect("wo");
    jitter_shifts(&mut net.encoder.store, &mut rng);
    let side = 16;
    let blob = |class: u8, r0: usize, c0: usize| {
        SegMask::from_fn(side, side, move |i, j| {
            if (r0..r0 + 6).contains(&i) && (c0..c0 + 7).contains(&j) {
                class
            } else {
                0
            }
        })
    };
    let support_masks = vec![blob(1, 2, 3), blob(1, 8, 6), blob(2, 4, 1), blob(2, 9, 8)];
    let query_masks = vec![SegMask::from_fn(side, side, |i, j| match (i, j) {
        (0..=5, 0..=6) => 1,
        (9..=14, 8..=14) => 2,
        _ => 0,
    })];
    let image = |masks: &[SegMask], rng: &mut ChaCha8Rng| {
        let noise = normal(rng, &[masks.len(), side, side, 1], 0.3);
        let data = noise
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + masks[i / (side * side)].labels()[i % (side * side)] as f64)
            .collect();
        Tensor::new(&[masks.len(), side, side, 1], data).expect("images")
    };
    let support = image(&support_masks, &mut rng);
    let query = image(&query_masks, &mut rng);
    TinyEpisode {
        net,
        support,
        query,
        support_masks,
        query_masks,
    }
}

fn finetune_objective(enc: &Binding<f64>, head: &Binding<f64>, ep: &TinyEpisode) -> Result<Var> {
    let tape = head.tape();
    let classes = [0, 1, 2];
    let fwd = forward_episode_var(
        enc,
        head,
        &ep.net,
        &ep.support,
        &ep.query,
        &ep.support_masks,
        &classes,
        train_pass(NormMode::Running),
    )?;
    let query = nll_var(tape, fwd.query_probs, &ep.query_masks)?;
    let reversed = reverse_support_probs_var(tape, &fwd, &classes, (16, 16), ep.net.config.epsilon)?;
    let support = nll_var(tape, reversed, &ep.support_masks)?;
    let proto = tape.add(query, support)?;
    match regularizer_var(head)? {
        Some(reg) => tape.add(proto, tape.scale(reg, LossConfig::default().reg_weight)),
        None => Ok(proto),
    }
}

fn finetune_objective_cases() -> Vec<GradCase> {
    let ep = tiny_episode();
    let head_report = full().run_params(
        |head| {
            let enc = Binding::new(head.tape(), &ep.net.encoder.store, false);
            finetune_objective(&enc, head, &ep)
        },
        &ep.net.head.store,
    );
    let encoder_report = sampled(4, 17).run_params(
        |enc| {
            let head = Binding::new(enc.tape(), &ep.net.head.store, false);
            finetune_objective(enc, &head, &ep)
        },
        &ep.net.encoder.store,
    );
    vec![
        GradCase {
            name: "bidirectional fine-tuning objective (head, temperature)",
            report: head_report,
        },
        GradCase {
            name: "bidirectional fine-tuning objective (encoder)",
            report: encoder_report,
        },
    ]
}

/// Every gradient case, in a fixed order.
pub fn suite() -> Vec<GradCase> {
    let mut cases = vec![
        sepconv_case(),
        inception_case("inception_sep_conv (running statistics)", NormMode::Running),
        inception_case("inception_sep_conv (batch statistics)", NormMode::Batch),
        encoder_case(),
    ];
    cases.extend(attention_cases());
    cases.extend(loss_cases());
    cases
}
