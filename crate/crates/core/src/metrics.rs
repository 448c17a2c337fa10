//! Confusion-matrix accumulation and the evaluation metric battery.

use serde::{Deserialize, Serialize};

use crate::data::SegMask;
use crate::error::{ensure, Result};

/// `K × K` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        ensure!(
            counts.len() == num_classes * num_classes,
            "{} counts for a {}x{} matrix",
            counts.len(),
            num_classes,
            num_classes
        );
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, prediction: &SegMask, ground_truth: &SegMask) -> Result<()> {
        ensure!(
            (prediction.height(), prediction.width()) == (ground_truth.height(), ground_truth.width()),
            "prediction {}x{} vs ground truth {}x{}",
            prediction.height(),
            prediction.width(),
            ground_truth.height(),
            ground_truth.width()
        );
        prediction.check_labels(self.num_classes)?;
        ground_truth.check_labels(self.num_classes)?;
        for (&p, &g) in prediction.labels().iter().zip(ground_truth.labels()) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(
            self.num_classes == other.num_classes,
            "cannot merge {}-class and {}-class matrices",
            self.num_classes,
            other.num_classes
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, c)).sum()
    }
}

pub fn confusion_matrix(prediction: &SegMask, ground_truth: &SegMask, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(prediction, ground_truth)?;
    Ok(cm)
}

/// Evaluation metrics in report column order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1_with_bg: f64,
    pub f1_no_bg: f64,
    pub miou_with_bg: f64,
    pub miou_no_bg: f64,
    pub balanced_acc: f64,
    pub mcc: f64,
    pub fw_iou: f64,
    /// Classes with no ground truth and no predictions, left out of macro means.
    #[serde(default)]
    pub excluded_classes: usize,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 7] = [
        "F1 w/bg",
        "F1 w/o",
        "mIoU w/bg",
        "mIoU w/o",
        "Bal. Acc.",
        "MCC",
        "FW IoU",
    ];
    pub const FIELDS: [&'static str; 7] = [
        "f1_with_bg",
        "f1_no_bg",
        "miou_with_bg",
        "miou_no_bg",
        "balanced_acc",
        "mcc",
        "fw_iou",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.f1_with_bg,
            self.f1_no_bg,
            self.miou_with_bg,
            self.miou_no_bg,
            self.balanced_acc,
            self.mcc,
            self.fw_iou,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        MetricReport {
            f1_with_bg: v[0],
            f1_no_bg: v[1],
            miou_with_bg: v[2],
            miou_no_bg: v[3],
            balanced_acc: v[4],
            mcc: v[5],
            fw_iou: v[6],
            excluded_classes: 0,
        }
    }

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
    }

    pub fn in_range(&self) -> bool {
        let v = self.values();
        v.iter().enumerate().all(|(i, &x)| {
            let lo = if i == 5 { -1.0 } else { 0.0 };
            x.is_finite() && (lo..=1.0).contains(&x)
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix, background_id: usize) -> Result<MetricReport> {
    let total = cm.total();
    ensure!(total > 0, "cannot compute metrics from an empty confusion matrix");
    let k = cm.num_classes;
    ensure!(background_id < k, "background id {} outside 0..{}", background_id, k);
    let s = total as f64;
    let (mut f1_all, mut f1_fg, mut iou_all, mut iou_fg, mut recalls) = (vec![], vec![], vec![], vec![], vec![]);
    let mut fw_iou = 0.0;
    let mut excluded = 0;
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        let t = cm.row_sum(c) as f64;
        let p = cm.col_sum(c) as f64;
        let (fp, fn_) = (p - tp, t - tp);
        if tp + fp + fn_ == 0.0 {
            excluded += 1;
            continue;
        }
        let f1 = if p > 0.0 && t > 0.0 {
            let (precision, recall) = (tp / p, tp / t);
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        } else {
            0.0
        };
        let iou = tp / (tp + fp + fn_);
        f1_all.push(f1);
        iou_all.push(iou);
        if c != background_id {
            f1_fg.push(f1);
            iou_fg.push(iou);
        }
        if t > 0.0 {
            recalls.push(tp / t);
            fw_iou += t * iou;
        }
    }
    let trace: f64 = (0..k).map(|c| cm.get(c, c) as f64).sum();
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let (p, t) = (cm.col_sum(c) as f64, cm.row_sum(c) as f64);
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    let mcc = if denom > 0.0 {
        ((trace * s - pt) / denom).clamp(-1.0, 1.0)
    } else if trace == s {
        1.0
    } else {
        0.0
    };
    Ok(MetricReport {
        f1_with_bg: mean(&f1_all),
        f1_no_bg: mean(&f1_fg),
        miou_with_bg: mean(&iou_all),
        miou_no_bg: mean(&iou_fg),
        balanced_acc: mean(&recalls),
        mcc,
        fw_iou: fw_iou / s,
        excluded_classes: excluded,
    })
}

/// Mean and population standard deviation of a set of reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricReport,
    pub std: MetricReport,
    pub episodes: usize,
}

pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    ensure!(!reports.is_empty(), "cannot summarize zero reports");
    let n = reports.len() as f64;
    let mut m = [0.0; 7];
    for r in reports {
        for (acc, v) in m.iter_mut().zip(r.values()) {
            *acc += v / n;
        }
    }
    let mut sd = [0.0; 7];
    for r in reports {
        for ((acc, v), mu) in sd.iter_mut().zip(r.values()).zip(m) {
            *acc += (v - mu).powi(2) / n;
        }
    }
    let mut mean = MetricReport::from_values(m);
    mean.excluded_classes = reports.iter().map(|r| r.excluded_classes).sum::<usize>() / reports.len();
    Ok(MetricSummary {
        mean,
        std: MetricReport::from_values(sd.map(f64::sqrt)),
        episodes: reports.len(),
    })
}
