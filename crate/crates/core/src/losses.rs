//! Prototypical (query/support) losses, the three-part pretraining loss and
//! the fine-tuning regularizer.
//!
//! All probability inputs are `(B, H, W, M)` tensors on the simplex along the
//! last axis; ground truth is one [`SegMask`] per image with labels `< M`.

use serde::{Deserialize, Serialize};

use crate::data::SegMask;
use crate::error::{ensure, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binding, ParamStore};

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub reg_weight: f64,
    pub bidirectional: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 0.5,
            dice_weight: 0.3,
            focal_weight: 0.2,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            reg_weight: 0.01,
            bidirectional: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ce_weight, self.dice_weight, self.focal_weight, self.reg_weight];
        ensure!(w.iter().all(|&v| v >= 0.0), "loss weights must be >= 0, got {:?}", w);
        ensure!(
            self.ce_weight + self.dice_weight + self.focal_weight > 0.0,
            "pretraining weights must not all be zero"
        );
        ensure!(self.focal_gamma >= 0.0, "focal_gamma must be >= 0");
        ensure!(self.dice_smooth >= 0.0, "dice_smooth must be >= 0");
        Ok(())
    }

    pub fn pretrain_total(&self, ce: f64, dice: f64, focal: f64) -> f64 {
        self.ce_weight * ce + self.dice_weight * dice + self.focal_weight * focal
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub query: f64,
    pub support: f64,
    pub proto: f64,
    pub ce: f64,
    pub dice: f64,
    pub focal: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.query,
            self.support,
            self.proto,
            self.ce,
            self.dice,
            self.focal,
            self.reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Validates shapes and labels; returns `(pixels per image, classes)`.
fn check<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask]) -> Result<(usize, usize)> {
    let (b, h, w, m) = probabilities.dims4()?;
    ensure!(
        ground_truth.len() == b,
        "{} masks for {} probability maps",
        ground_truth.len(),
        b
    );
    for g in ground_truth {
        ensure!(
            (g.height(), g.width()) == (h, w),
            "mask {}x{} does not match probabilities {}x{}",
            g.height(),
            g.width(),
            h,
            w
        );
        ensure!(
            (g.max_label() as usize) < m,
            "label {} outside episode label space 0..{}",
            g.max_label(),
            m
        );
    }
    Ok((h * w, m))
}

fn true_probs<'a, T: Real>(probabilities: &'a Tensor<T>, ground_truth: &'a [SegMask], m: usize) -> impl Iterator<Item = (usize, T)> + 'a {
    ground_truth
        .iter()
        .flat_map(|g| g.labels().iter())
        .enumerate()
        .map(move |(pix, &label)| {
            let idx = pix * m + label as usize;
            (idx, probabilities.data()[idx])
        })
}

fn clamped_nll<T: Real>(p: T) -> T {
    -p.max(T::of(LOG_CLAMP)).ln()
}

/// Mean over images and pixels of `−log max(p_true, 1e-12)`.
pub fn query_loss<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask]) -> Result<T> {
    let (_, m) = check(probabilities, ground_truth)?;
    let n = probabilities.len() / m;
    let sum: T = true_probs(probabilities, ground_truth, m).map(|(_, p)| clamped_nll(p)).sum();
    Ok(sum / T::of(n as f64))
}

/// Same reduction over the `n·k` support predictions of the reversed pass.
pub fn support_loss<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask], n: usize, k: usize) -> Result<T> {
    ensure!(
        ground_truth.len() == n * k,
        "support loss expects n·k = {} masks, got {}",
        n * k,
        ground_truth.len()
    );
    query_loss(probabilities, ground_truth)
}

pub fn proto_loss(query: f64, support: f64, config: &LossConfig) -> f64 {
    if config.bidirectional {
        query + support
    } else {
        query
    }
}

/// Per-class soft Dice terms `(2·I_c + s) / (P_c + G_c + s)`; a term with a
/// zero denominator counts as perfect overlap.
fn dice_terms<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask], m: usize, smooth: T) -> Vec<(T, T, T)> {
    let mut inter = vec![T::zero(); m];
    let mut pred = vec![T::zero(); m];
    let mut truth = vec![T::zero(); m];
    let labels = ground_truth.iter().flat_map(|g| g.labels().iter());
    for (row, &label) in probabilities.data().chunks(m).zip(labels) {
        for (c, &p) in row.iter().enumerate() {
            pred[c] += p;
        }
        inter[label as usize] += row[label as usize];
        truth[label as usize] += T::one();
    }
    (0..m)
        .map(|c| (T::of(2.0) * inter[c] + smooth, pred[c] + truth[c] + smooth, inter[c]))
        .collect()
}

fn dice_value<T: Real>(num: T, den: T) -> T {
    if den > T::zero() {
        num / den
    } else {
        T::one()
    }
}

/// `1 − mean_c (2·Σ p_c g_c + s) / (Σ p_c + Σ g_c + s)` over all classes.
pub fn dice_loss<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask], smooth: f64) -> Result<T> {
    let (_, m) = check(probabilities, ground_truth)?;
    let terms = dice_terms(probabilities, ground_truth, m, T::of(smooth));
    let mean = terms.iter().map(|&(n, d, _)| dice_value(n, d)).sum::<T>() / T::of(m as f64);
    Ok(T::one() - mean)
}

fn focal_pixel<T: Real>(p: T, gamma: T) -> T {
    (T::one() - p).max(T::zero()).powf(gamma) * clamped_nll(p)
}

/// Mean over pixels of `(1 − p_true)^γ · (−log p_true)`.
pub fn focal_loss<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask], config: &LossConfig) -> Result<T> {
    let (_, m) = check(probabilities, ground_truth)?;
    let gamma = T::of(config.focal_gamma);
    let n = probabilities.len() / m;
    let sum: T = true_probs(probabilities, ground_truth, m).map(|(_, p)| focal_pixel(p, gamma)).sum();
    Ok(sum / T::of(n as f64))
}

pub fn pretrain_loss<T: Real>(probabilities: &Tensor<T>, ground_truth: &[SegMask], config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    let ce = query_loss(probabilities, ground_truth)?.as_f64();
    let dice = dice_loss(probabilities, ground_truth, config.dice_smooth)?.as_f64();
    let focal = focal_loss(probabilities, ground_truth, config)?.as_f64();
    Ok(LossBreakdown {
        ce,
        dice,
        focal,
        total: config.pretrain_total(ce, dice, focal),
        ..LossBreakdown::default()
    })
}

/// `proto + λ·‖θ_head‖²` over the trainable head parameters.
pub fn finetune_loss<T: Real>(proto: f64, head_params: &ParamStore<T>, config: &LossConfig) -> LossBreakdown {
    let reg = head_params.squared_norm();
    LossBreakdown {
        proto,
        reg,
        total: proto + config.reg_weight * reg,
        ..LossBreakdown::default()
    }
}

/// Per-pixel `−log max(p_true, 1e-12)` as a flat `(B·H·W,)` variable.
pub fn pixel_nll_var<T: Real>(tape: &Tape<T>, probabilities: Var, ground_truth: &[SegMask]) -> Result<Var> {
    let pv = tape.value(probabilities);
    let (_, m) = check(&pv, ground_truth)?;
    let picks: Vec<(usize, T)> = true_probs(&pv, ground_truth, m).collect();
    let out = Tensor::new(&[picks.len()], picks.iter().map(|&(_, p)| clamped_nll(p)).collect())?;
    let shape = pv.shape().to_vec();
    Ok(tape.custom(out, &[probabilities], move |g, _| {
        let mut d = vec![T::zero(); shape.iter().product()];
        for (&(idx, p), &gv) in picks.iter().zip(g.data()) {
            if p > T::of(LOG_CLAMP) {
                d[idx] = -gv / p;
            }
        }
        vec![Some(Tensor::new(&shape, d).expect("shape preserved"))]
    }))
}

/// `Σ w_i x_i / Σ w_i` with constant weights.
pub fn weighted_mean_var<T: Real>(tape: &Tape<T>, values: Var, weights: &[T]) -> Result<Var> {
    let n = tape.value(values).len();
    ensure!(weights.len() == n, "{} weights for {} values", weights.len(), n);
    let total: T = weights.iter().copied().sum();
    ensure!(total > T::zero(), "weights must have a positive sum");
    let w = tape.constant(Tensor::new(tape.shape(values).as_slice(), weights.iter().map(|&v| v / total).collect())?);
    Ok(tape.sum(tape.mul(values, w)?))
}

/// Mean negative log-likelihood; shared by query, support and CE terms.
pub fn nll_var<T: Real>(tape: &Tape<T>, probabilities: Var, ground_truth: &[SegMask]) -> Result<Var> {
    let per_pixel = pixel_nll_var(tape, probabilities, ground_truth)?;
    Ok(tape.mean(per_pixel))
}

pub fn dice_loss_var<T: Real>(tape: &Tape<T>, probabilities: Var, ground_truth: &[SegMask], smooth: f64) -> Result<Var> {
    let pv = tape.value(probabilities);
    let (_, m) = check(&pv, ground_truth)?;
    let terms = dice_terms(&pv, ground_truth, m, T::of(smooth));
    let mean = terms.iter().map(|&(n, d, _)| dice_value(n, d)).sum::<T>() / T::of(m as f64);
    let out = Tensor::scalar(T::one() - mean);
    let labels: Vec<u8> = ground_truth.iter().flat_map(|g| g.labels().iter().copied()).collect();
    let shape = pv.shape().to_vec();
    Ok(tape.custom(out, &[probabilities], move |g, _| {
        let scale = -g.data()[0] / T::of(m as f64);
        // ∂/∂p_c of (2I+s)/(D): (2·g_c·D − (2I+s)) / D²
        let coef: Vec<(T, T)> = terms
            .iter()
            .map(|&(num, den, _)| {
                if den > T::zero() {
                    (T::of(2.0) / den, -num / (den * den))
                } else {
                    (T::zero(), T::zero())
                }
            })
            .collect();
        let mut d = vec![T::zero(); shape.iter().product()];
        for (pix, &label) in labels.iter().enumerate() {
            for c in 0..m {
                let mut v = coef[c].1;
                if c == label as usize {
                    v += coef[c].0;
                }
                d[pix * m + c] = scale * v;
            }
        }
        vec![Some(Tensor::new(&shape, d).expect("shape preserved"))]
    }))
}

pub fn focal_loss_var<T: Real>(tape: &Tape<T>, probabilities: Var, ground_truth: &[SegMask], gamma: f64) -> Result<Var> {
    let pv = tape.value(probabilities);
    let (_, m) = check(&pv, ground_truth)?;
    let g_exp = T::of(gamma);
    let picks: Vec<(usize, T)> = true_probs(&pv, ground_truth, m).collect();
    let n = T::of(picks.len() as f64);
    let value = picks.iter().map(|&(_, p)| focal_pixel(p, g_exp)).sum::<T>() / n;
    let shape = pv.shape().to_vec();
    Ok(tape.custom(Tensor::scalar(value), &[probabilities], move |g, _| {
        let scale = g.data()[0] / n;
        let mut d = vec![T::zero(); shape.iter().product()];
        for &(idx, p) in &picks {
            if p <= T::of(LOG_CLAMP) {
                continue;
            }
            let q = (T::one() - p).max(T::zero());
            let nll = -p.ln();
            let mut grad = -q.powf(g_exp) / p;
            if gamma != 0.0 && q > T::zero() {
                grad -= g_exp * q.powf(g_exp - T::one()) * nll;
            }
            d[idx] = scale * grad;
        }
        vec![Some(Tensor::new(&shape, d).expect("shape preserved"))]
    }))
}

/// Scalar variables of the pretraining objective.
#[derive(Clone, Copy, Debug)]
pub struct PretrainTerms {
    pub ce: Var,
    pub dice: Var,
    pub focal: Var,
    pub total: Var,
}

pub fn pretrain_loss_var<T: Real>(
    tape: &Tape<T>,
    probabilities: Var,
    ground_truth: &[SegMask],
    config: &LossConfig,
) -> Result<PretrainTerms> {
    config.validate()?;
    let ce = nll_var(tape, probabilities, ground_truth)?;
    let dice = dice_loss_var(tape, probabilities, ground_truth, config.dice_smooth)?;
    let focal = focal_loss_var(tape, probabilities, ground_truth, config.focal_gamma)?;
    let total = tape.add_scalars(&[
        tape.scale(ce, T::of(config.ce_weight)),
        tape.scale(dice, T::of(config.dice_weight)),
        tape.scale(focal, T::of(config.focal_weight)),
    ])?;
    Ok(PretrainTerms { ce, dice, focal, total })
}

/// `‖θ‖²` over the trainable entries of a binding; `None` when there are none.
pub fn regularizer_var<T: Real>(bind: &Binding<T>) -> Result<Option<Var>> {
    let names: Vec<String> = bind.store().trainable().map(|(n, _)| n.to_string()).collect();
    if names.is_empty() {
        return Ok(None);
    }
    let tape = bind.tape();
    let parts = names
        .iter()
        .map(|n| Ok(tape.sum_squares(bind.var(n)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(tape.add_scalars(&parts)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(b: usize, h: usize, w: usize, rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(&[b, h, w, 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_losses() {
        let p = probs(1, 1, 2, &[[1.0, 0.0], [0.0, 1.0]]);
        let gt = [SegMask::new(1, 2, vec![0, 1]).unwrap()];
        assert!(query_loss(&p, &gt).unwrap() <= 1e-11);
        assert_eq!(dice_loss(&p, &gt, 1.0).unwrap(), 0.0);
        assert_eq!(focal_loss(&p, &gt, &LossConfig::default()).unwrap(), 0.0);
        assert!(pretrain_loss(&p, &gt, &LossConfig::default()).unwrap().total <= 1e-10);
    }

    #[test]
    fn uniform_closed_forms() {
        let p = probs(1, 1, 2, &[[0.5, 0.5], [0.5, 0.5]]);
        let gt = [SegMask::new(1, 2, vec![0, 1]).unwrap()];
        assert!((query_loss(&p, &gt).unwrap() - 2f64.ln()).abs() < 1e-15);
        let f = focal_loss(&p, &gt, &LossConfig::default()).unwrap();
        assert!((f - 0.25 * 2f64.ln()).abs() < 1e-15);
        let third = Tensor::full(&[2, 1, 1, 3], 1.0 / 3.0);
        let gt3 = [SegMask::new(1, 1, vec![2]).unwrap(), SegMask::new(1, 1, vec![0]).unwrap()];
        assert!((support_loss(&third, &gt3, 2, 1).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!(support_loss(&third, &gt3, 1, 1).is_err());
    }

    #[test]
    fn dice_overlap_arithmetic() {
        let gt = [SegMask::new(1, 4, vec![0, 0, 1, 1]).unwrap()];
        let half = probs(1, 1, 4, &[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!((dice_loss(&half, &gt, 0.0).unwrap() - 0.5).abs() < 1e-15);
        let disjoint = probs(1, 1, 4, &[[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        assert!((dice_loss(&disjoint, &gt, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let p = probs(1, 1, 3, &[[0.3, 0.7], [0.9, 0.1], [0.45, 0.55]]);
        let gt = [SegMask::new(1, 3, vec![1, 0, 0]).unwrap()];
        let cfg = LossConfig {
            focal_gamma: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(focal_loss(&p, &gt, &cfg).unwrap(), query_loss(&p, &gt).unwrap());
    }

    #[test]
    fn weighted_sums() {
        let cfg = LossConfig::default();
        assert!((cfg.pretrain_total(1.0, 0.5, 0.2) - 0.69).abs() < 1e-15);
        assert!((proto_loss(0.3, 0.4, &cfg) - 0.7).abs() < 1e-15);
        let uni = LossConfig {
            bidirectional: false,
            ..cfg.clone()
        };
        assert_eq!(proto_loss(0.3, 99.0, &uni), 0.3);
        assert_eq!(proto_loss(0.0, 0.0, &cfg), 0.0);
        let ce_only = LossConfig {
            ce_weight: 1.0,
            dice_weight: 0.0,
            focal_weight: 0.0,
            ..cfg
        };
        let p = probs(1, 1, 2, &[[0.2, 0.8], [0.6, 0.4]]);
        let gt = [SegMask::new(1, 2, vec![0, 0]).unwrap()];
        let b = pretrain_loss(&p, &gt, &ce_only).unwrap();
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn finetune_regularizer() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap(), crate::params::ParamKind::Trainable);
        let b = finetune_loss(1.0, &store, &LossConfig::default());
        assert!((b.total - 1.02).abs() < 1e-15);
        let zero = LossConfig {
            reg_weight: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(finetune_loss(1.0, &store, &zero).total, 1.0);
        assert_eq!(finetune_loss(1.0, &ParamStore::<f64>::new(), &LossConfig::default()).total, 1.0);
    }

    #[test]
    fn label_outside_space_is_rejected() {
        let p = probs(1, 1, 1, &[[0.5, 0.5]]);
        assert!(query_loss(&p, &[SegMask::new(1, 1, vec![2]).unwrap()]).is_err());
    }

    #[test]
    fn tape_versions_match_pure_values() {
        let p = probs(1, 1, 3, &[[0.3, 0.7], [0.9, 0.1], [0.45, 0.55]]);
        let gt = [SegMask::new(1, 3, vec![1, 0, 0]).unwrap()];
        let tape = Tape::new();
        let v = tape.leaf(p.clone());
        let t = pretrain_loss_var(&tape, v, &gt, &LossConfig::default()).unwrap();
        let pure = pretrain_loss(&p, &gt, &LossConfig::default()).unwrap();
        assert!((tape.value(t.total).data()[0] - pure.total).abs() < 1e-15);
        assert!((tape.value(t.dice).data()[0] - pure.dice).abs() < 1e-15);
    }
}
