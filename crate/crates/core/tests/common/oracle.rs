//! Brute-force reference implementations written as plain loops over
//! pixels, independent of the library's confusion-matrix formulations.

use rand::Rng;

/// Masked mean of `(h, w, c)` features under an `(mh, mw)` label mask that
/// is sampled at `⌊i·mh/h⌋, ⌊j·mw/w⌋`. `None` when the class is absent.
#[allow(clippy::too_many_arguments)]
pub fn masked_pool(
    features: &[f64],
    (h, w, c): (usize, usize, usize),
    mask: &[u8],
    (mh, mw): (usize, usize),
    class: usize,
    epsilon: f64,
) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            let label = mask[(i * mh / h) * mw + j * mw / w];
            if label as usize == class {
                count += 1;
                for (k, s) in sum.iter_mut().enumerate() {
                    *s += features[(i * w + j) * c + k];
                }
            }
        }
    }
    (count > 0).then(|| sum.iter().map(|s| s / (count as f64 + epsilon)).collect())
}

/// `counts[truth][prediction]`.
pub fn confusion(pred: &[u8], truth: &[u8], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for i in 0..pred.len() {
        m[truth[i] as usize][pred[i] as usize] += 1;
    }
    m
}

/// F1 w/bg, F1 w/o, mIoU w/bg, mIoU w/o, balanced accuracy, MCC, FW IoU.
///
/// Classes with no ground truth and no prediction are skipped. MCC is the
/// one-hot covariance form `cov(X, Y) / √(cov(X, X)·cov(Y, Y))`.
pub fn metrics(pred: &[u8], truth: &[u8], k: usize, background: usize) -> [f64; 7] {
    let n = pred.len();
    let (mut f1_all, mut f1_fg, mut iou_all, mut iou_fg, mut recalls) = (vec![], vec![], vec![], vec![], vec![]);
    let mut fw = 0.0;
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let (p, t) = (pred[i] as usize == c, truth[i] as usize == c);
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        let f1 = if tp + fp == 0 || tp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        f1_all.push(f1);
        iou_all.push(iou);
        if c != background {
            f1_fg.push(f1);
            iou_fg.push(iou);
        }
        if tp + fn_ > 0 {
            recalls.push(tp as f64 / (tp + fn_) as f64);
            fw += (tp + fn_) as f64 / n as f64 * iou;
        }
    }

    let onehot = |labels: &[u8], i: usize, c: usize| if labels[i] as usize == c { 1.0 } else { 0.0 };
    let mean_of = |labels: &[u8], c: usize| (0..n).map(|i| onehot(labels, i, c)).sum::<f64>() / n as f64;
    let cov = |a: &[u8], b: &[u8]| {
        let mut s = 0.0;
        for c in 0..k {
            let (ma, mb) = (mean_of(a, c), mean_of(b, c));
            for i in 0..n {
                s += (onehot(a, i, c) - ma) * (onehot(b, i, c) - mb);
            }
        }
        s
    };
    let (cxy, cxx, cyy) = (cov(pred, truth), cov(pred, pred), cov(truth, truth));
    let mcc = if cxx > 0.0 && cyy > 0.0 {
        cxy / (cxx * cyy).sqrt()
    } else if pred == truth {
        1.0
    } else {
        0.0
    };

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    [
        mean(&f1_all),
        mean(&f1_fg),
        mean(&iou_all),
        mean(&iou_fg),
        mean(&recalls),
        mcc,
        fw,
    ]
}

/// Random prediction/truth label pair over `k` classes. Some classes are
/// left out of both, and predictions copy the truth with a random rate.
pub struct LabelInstance {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub pred: Vec<u8>,
    pub truth: Vec<u8>,
}

pub fn label_instance(rng: &mut impl Rng) -> LabelInstance {
    let k = rng.random_range(2..=6);
    let (height, width) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let active: Vec<u8> = (0..k as u8).filter(|_| rng.random_bool(0.75)).collect();
    let active = if active.is_empty() { vec![0] } else { active };
    let n = height * width;
    let truth: Vec<u8> = (0..n).map(|_| active[rng.random_range(0..active.len())]).collect();
    let keep = rng.random::<f64>();
    let pred = truth
        .iter()
        .map(|&t| {
            if rng.random_bool(keep) {
                t
            } else {
                active[rng.random_range(0..active.len())]
            }
        })
        .collect();
    LabelInstance {
        height,
        width,
        k,
        pred,
        truth,
    }
}
