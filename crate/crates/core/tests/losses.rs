use proptest::prelude::*;

use protoseg::data::SegMask;
use protoseg::losses::{dice_loss, focal_loss, nll_var, pretrain_loss, query_loss, support_loss, LossConfig};
use protoseg::numerics::{softmax_rowwise, Tape};
use protoseg::Tensor;

fn probabilities(logits: Vec<f64>, h: usize, w: usize, m: usize) -> Tensor<f64> {
    let t = Tensor::new(&[h * w, m], logits).unwrap();
    softmax_rowwise(&t, 1).unwrap().reshape(&[1, h, w, m]).unwrap()
}

#[test]
fn one_hot_and_uniform_references() {
    let gt = SegMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
    let onehot = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| (gt.labels()[i / 3] as usize == i % 3) as u8 as f64);
    let cfg = LossConfig::default();
    let b = pretrain_loss(&onehot, std::slice::from_ref(&gt), &cfg).unwrap();
    assert!(b.ce.abs() < 1e-12 && b.focal.abs() < 1e-12 && b.dice.abs() < 1e-12);
    let uniform = Tensor::<f64>::full(&[1, 2, 2, 3], 1.0 / 3.0);
    let ce = query_loss(&uniform, std::slice::from_ref(&gt)).unwrap();
    assert!((ce - 3f64.ln()).abs() < 1e-12);
    let focal = focal_loss(&uniform, std::slice::from_ref(&gt), &cfg).unwrap();
    assert!((focal - (2.0f64 / 3.0).powi(2) * 3f64.ln()).abs() < 1e-12);
}

#[test]
fn support_loss_checks_mask_count() {
    let gt = vec![SegMask::filled(2, 2, 0); 4];
    let p = Tensor::<f64>::full(&[4, 2, 2, 2], 0.5);
    assert!(support_loss(&p, &gt, 2, 2).is_ok());
    assert!(support_loss(&p, &gt, 2, 3).is_err());
    assert!(query_loss(&p, &gt[..3]).is_err());
}

#[test]
fn zero_probability_is_clamped() {
    let gt = SegMask::filled(1, 1, 1);
    let p = Tensor::<f64>::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
    let ce = query_loss(&p, std::slice::from_ref(&gt)).unwrap();
    assert!((ce - 1e12f64.ln()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn losses_are_bounded_and_tape_agrees(
        (h, w, m, logits, labels) in (1usize..5, 1usize..5, 2usize..5).prop_flat_map(|(h, w, m)| (
            Just(h), Just(w), Just(m),
            proptest::collection::vec(-6.0f64..6.0, h * w * m),
            proptest::collection::vec(0u8..m as u8, h * w),
        ))
    ) {
        let p = probabilities(logits, h, w, m);
        let gt = vec![SegMask::new(h, w, labels).unwrap()];
        let ce = query_loss(&p, &gt).unwrap();
        let dice = dice_loss(&p, &gt, 1.0).unwrap();
        let focal = focal_loss(&p, &gt, &LossConfig::default()).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
        prop_assert!((0.0..=1.0).contains(&dice));
        prop_assert!(focal >= 0.0 && focal <= ce + 1e-12);
        let tape = Tape::new();
        let v = tape.leaf(p.clone());
        let nll = tape.value(nll_var(&tape, v, &gt).unwrap()).data()[0];
        prop_assert!((nll - ce).abs() < 1e-12);
    }
}
