mod common;

use m2sformer::data::{kfold, ForgerySample, ForgeryType};
use m2sformer::metrics::{self, binarize, BinaryMask, ConfusionCounts, FoldMetrics, MetricsReport};
use m2sformer::tensor::Tensor;
use proptest::prelude::*;

fn mask_strategy(n: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), n)
        .prop_map(move |bits| BinaryMask::new(1, n, bits).unwrap())
}

fn sample(id: &str, mask: Vec<f64>) -> ForgerySample {
    let n = mask.len();
    ForgerySample::new(
        id,
        Tensor::zeros(&[3, 1, n]),
        Tensor::new(&[1, n], mask).unwrap(),
        ForgeryType::Unknown,
    )
    .unwrap()
}

#[test]
fn confusion_counts_by_hand() {
    let p = BinaryMask::new(2, 3, vec![true, true, false, false, true, false]).unwrap();
    let t = BinaryMask::new(2, 3, vec![true, false, true, false, true, false]).unwrap();
    let c = ConfusionCounts::between(&p, &t).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 2));
    assert_eq!(c.dsc(), 4.0 / 6.0);
    assert_eq!(c.iou(), 0.5);
}

#[test]
fn empty_prediction_against_nonempty_target_is_zero() {
    let p = BinaryMask::new(1, 4, vec![false; 4]).unwrap();
    let t = BinaryMask::new(1, 4, vec![false, true, false, false]).unwrap();
    assert_eq!(metrics::dsc(&p, &t).unwrap(), 0.0);
    assert_eq!(metrics::miou(&p, &t).unwrap(), 0.0);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
    let b = BinaryMask::new(1, 4, vec![true; 4]).unwrap();
    assert!(metrics::dsc(&a, &b).is_err());
    assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
}

#[test]
fn binarize_uses_inclusive_threshold() {
    let t = Tensor::new(&[1, 4], vec![0.2, 0.5, 0.51, 0.49]).unwrap();
    assert_eq!(
        binarize(&t, 0.5).unwrap().bits,
        vec![false, true, true, false]
    );
}

#[test]
fn report_aggregates_percentages() {
    let folds = (0..5)
        .map(|f| FoldMetrics {
            fold: f,
            samples: 2,
            dsc: 0.5 + 0.1 * f as f64,
            miou: 0.4,
        })
        .collect();
    let r = MetricsReport::from_folds("toy", folds).unwrap();
    assert!((r.dsc_mean - 70.0).abs() < 1e-9);
    assert!((r.dsc_std - 200f64.sqrt()).abs() < 1e-9);
    assert!((r.miou_mean - 40.0).abs() < 1e-9);
    assert!(r.miou_std.abs() < 1e-9);
    assert_eq!(r.to_csv().lines().count(), 7);
    assert!(MetricsReport::from_folds("toy", vec![]).is_err());
}

#[test]
fn evaluate_with_oracle_and_inverted_predictors() {
    let samples: Vec<_> = (0..10)
        .map(|i| {
            sample(
                &format!("s{i}"),
                (0..8).map(|j| ((i + j) % 3 == 0) as u8 as f64).collect(),
            )
        })
        .collect();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let folds = kfold(&ids, 5, 1).unwrap();

    let perfect =
        metrics::evaluate("toy", &samples, &folds, 0.5, &mut |_, s| Ok(s.mask.clone())).unwrap();
    assert_eq!(perfect.folds.len(), 5);
    assert!(perfect
        .folds
        .iter()
        .all(|f| f.dsc == 1.0 && f.miou == 1.0 && f.samples == 2));
    assert_eq!(perfect.dsc_std, 0.0);

    let inverted = metrics::evaluate("toy", &samples, &folds, 0.5, &mut |_, s| {
        Ok(s.mask.map(|v| 1.0 - v))
    })
    .unwrap();
    assert_eq!(inverted.dsc_mean, 0.0);

    let mut seen = vec![0; 5];
    metrics::evaluate("toy", &samples, &folds, 0.5, &mut |f, s| {
        seen[f] += 1;
        assert_eq!(folds.fold_of[&s.id], f);
        Ok(s.mask.clone())
    })
    .unwrap();
    assert_eq!(seen, vec![2; 5]);
}

proptest! {
    #[test]
    fn dsc_and_iou_bounds_and_symmetry(a in mask_strategy(24), b in mask_strategy(24)) {
        let d = metrics::dsc(&a, &b).unwrap();
        let j = metrics::miou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!(j <= d);
        prop_assert_eq!(d, metrics::dsc(&b, &a).unwrap());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
    }

    #[test]
    fn self_overlap_is_perfect(a in mask_strategy(17)) {
        prop_assert_eq!(metrics::dsc(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(metrics::miou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn counts_partition_the_pixels(a in mask_strategy(30), b in mask_strategy(30)) {
        let c = ConfusionCounts::between(&a, &b).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, 30);
        prop_assert_eq!((c.tp + c.fp) as usize, a.count());
        prop_assert_eq!((c.tp + c.fn_) as usize, b.count());
    }
}
