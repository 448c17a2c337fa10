mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protoseg::data::SegMask;
use protoseg::metrics::{compute_metrics, confusion_matrix, summarize, ConfusionMatrix, MetricReport};

use common::oracle;

fn masks(pred: &[u8], truth: &[u8]) -> (SegMask, SegMask) {
    (
        SegMask::new(1, pred.len(), pred.to_vec()).unwrap(),
        SegMask::new(1, truth.len(), truth.to_vec()).unwrap(),
    )
}

#[test]
fn perfect_prediction_scores_one() {
    let labels = [0, 0, 1, 2, 2, 2, 0, 1];
    let (p, t) = masks(&labels, &labels);
    let r = compute_metrics(&confusion_matrix(&p, &t, 4).unwrap(), 0).unwrap();
    assert_eq!(r.values(), [1.0; 7]);
    assert_eq!(r.excluded_classes, 1);
}

#[test]
fn hand_computed_two_class_case() {
    // truth: 0 0 1 1, pred: 0 1 1 1 → class 0: tp 1 fn 1; class 1: tp 2 fp 1.
    let (p, t) = masks(&[0, 1, 1, 1], &[0, 0, 1, 1]);
    let cm = confusion_matrix(&p, &t, 2).unwrap();
    assert_eq!(cm.counts(), &[1, 1, 0, 2]);
    let r = compute_metrics(&cm, 0).unwrap();
    assert!((r.f1_no_bg - 0.8).abs() < 1e-15);
    assert!((r.f1_with_bg - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    assert!((r.miou_no_bg - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.miou_with_bg - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((r.balanced_acc - 0.75).abs() < 1e-15);
    assert!((r.mcc - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    assert!((r.fw_iou - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn degenerate_matrices() {
    // Only background everywhere: MCC denominator vanishes on a perfect diagonal.
    let (p, t) = masks(&[0, 0, 0], &[0, 0, 0]);
    let r = compute_metrics(&confusion_matrix(&p, &t, 3).unwrap(), 0).unwrap();
    assert_eq!(r.mcc, 1.0);
    assert_eq!(r.f1_no_bg, 0.0);
    // Constant wrong prediction.
    let (p, t) = masks(&[1, 1, 1], &[0, 0, 1]);
    let r = compute_metrics(&confusion_matrix(&p, &t, 2).unwrap(), 0).unwrap();
    assert_eq!(r.mcc, 0.0);
    assert!(compute_metrics(&ConfusionMatrix::new(2), 0).is_err());
    assert!(confusion_matrix(&p, &t, 1).is_err());
}

#[test]
fn merge_and_summary() {
    let (p, t) = masks(&[0, 1], &[1, 1]);
    let mut a = confusion_matrix(&p, &t, 2).unwrap();
    let b = confusion_matrix(&t, &t, 2).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a.counts(), &[0, 0, 1, 3]);
    let reports = [MetricReport::from_values([0.5; 7]), MetricReport::from_values([1.0; 7])];
    let s = summarize(&reports).unwrap();
    assert_eq!(s.mean.values(), [0.75; 7]);
    assert_eq!(s.std.values(), [0.25; 7]);
    assert!(MetricReport::csv_header().starts_with("F1 w/bg,F1 w/o,mIoU w/bg"));
}

proptest! {
    #[test]
    fn metrics_match_the_loop_oracle(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = oracle::label_instance(&mut rng);
        let (p, t) = (
            SegMask::new(inst.height, inst.width, inst.pred.clone()).unwrap(),
            SegMask::new(inst.height, inst.width, inst.truth.clone()).unwrap(),
        );
        let cm = confusion_matrix(&p, &t, inst.k).unwrap();
        let want_cm = oracle::confusion(&inst.pred, &inst.truth, inst.k);
        prop_assert_eq!(cm.counts().to_vec(), want_cm.concat());
        let r = compute_metrics(&cm, 0).unwrap();
        prop_assert!(r.in_range(), "{:?} {:?}", r, cm);
        for (g, w) in r.values().iter().zip(oracle::metrics(&inst.pred, &inst.truth, inst.k, 0)) {
            prop_assert!((g - w).abs() <= 1e-9, "{} vs {}", g, w);
        }
    }
}
