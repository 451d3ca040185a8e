mod common;

use m2sformer::difficulty::{
    self, classify, curvature_field, difficulty_score, sobel, CurvatureField, CurvatureMode,
    DifficultyConfig, DifficultyLabel, GlobalPriorMap,
};
use m2sformer::error::Error;
use m2sformer::tensor::Tensor;
use proptest::prelude::*;

fn transpose(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[w, h], |i| t.data()[(i % h) * w + i / h])
}

#[test]
fn sobel_of_linear_ramps() {
    let ramp_x = Tensor::from_fn(&[6, 7], |i| 3.0 * (i % 7) as f64);
    let (gx, gy) = sobel(&ramp_x).unwrap();
    for y in 0..6 {
        for x in 1..6 {
            assert_eq!(gx.data()[y * 7 + x], 24.0);
        }
    }
    assert!(gy.data().iter().all(|&v| v == 0.0));
    // Replicate padding halves the response on the border columns.
    assert_eq!(gx.data()[0], 12.0);
    assert_eq!(gx.data()[6], 12.0);
}

#[test]
fn sobel_of_constant_is_zero() {
    let (gx, gy) = sobel(&Tensor::full(&[4, 4], 0.7)).unwrap();
    assert!(gx.data().iter().chain(gy.data()).all(|&v| v.abs() < 1e-12));
}

#[test]
fn sobel_rejects_small_or_flat_input() {
    assert!(matches!(
        sobel(&Tensor::zeros(&[2, 8])),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        sobel(&Tensor::zeros(&[3, 3, 1])),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn flat_prior_scores_zero() {
    let p = GlobalPriorMap::new(4, 4, vec![0.4; 16]).unwrap();
    let v = difficulty::assess(&p, &DifficultyConfig::default()).unwrap();
    assert_eq!(v.score, 0.0);
    assert_eq!(v.label, DifficultyLabel::Easy);
}

#[test]
fn blob_is_scored_by_curvature_sign() {
    // A bright disc has convex level sets; negate it and the sign of the mean
    // curvature flips, which puts the two scores on opposite sides of 0.5.
    let n = 12;
    let disc = |sign: f64| {
        let v = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - 5.5, (i % n) as f64 - 5.5);
                0.5 + sign * 0.4 * (-(x * x + y * y) / 8.0).exp()
            })
            .collect();
        GlobalPriorMap::new(n, n, v).unwrap()
    };
    let cfg = DifficultyConfig {
        mode: CurvatureMode::Standard,
        ..Default::default()
    };
    let up = difficulty::assess(&disc(1.0), &cfg).unwrap().score;
    let down = difficulty::assess(&disc(-1.0), &cfg).unwrap().score;
    assert!((up - 0.5) * (down - 0.5) < 0.0, "{up} {down}");
    assert!((up - 0.5 + down - 0.5).abs() < 1e-12);
}

#[test]
fn score_weights_curvature_by_edge_strength() {
    let field = CurvatureField {
        kappa: Tensor::new(&[1, 3], vec![2.0, -1.0, 5.0]).unwrap(),
        edge: Tensor::new(&[1, 3], vec![1.0, 3.0, 0.0]).unwrap(),
    };
    let s = difficulty_score(&field, 1e-8).unwrap();
    let expected = 1.0 / (1.0 + f64::exp(-(2.0 - 3.0) / 4.0));
    assert!((s - expected).abs() < 1e-15);

    let dead = CurvatureField {
        kappa: Tensor::full(&[2, 2], 9.0),
        edge: Tensor::zeros(&[2, 2]),
    };
    assert_eq!(difficulty_score(&dead, 1e-8).unwrap(), 0.0);
}

#[test]
fn classify_threshold_is_inclusive() {
    assert_eq!(classify(0.5, 0.5).label, DifficultyLabel::Hard);
    assert_eq!(classify(0.5 - 1e-12, 0.5).label, DifficultyLabel::Easy);
    assert_eq!(classify(0.0, 0.0).label, DifficultyLabel::Hard);
    assert_eq!(classify(1.0, 1.0).label, DifficultyLabel::Hard);
    assert_eq!(DifficultyLabel::Hard.as_str(), "hard");
    assert_eq!(DifficultyLabel::Easy.to_string(), "easy");
}

#[test]
fn prior_map_validation() {
    assert!(GlobalPriorMap::new(2, 2, vec![0.1; 3]).is_err());
    assert!(GlobalPriorMap::new(2, 2, vec![0.1, 0.2, 1.2, 0.0]).is_err());
    assert!(GlobalPriorMap::new(2, 2, vec![0.1, f64::NAN, 0.2, 0.0]).is_err());
    assert!(GlobalPriorMap::new(2, 2, vec![0.0, 0.5, 0.5, 0.5]).is_err());
    let ok = GlobalPriorMap::new(2, 3, vec![0.01, 0.99, 0.5, 0.5, 0.5, 0.5]).unwrap();
    assert_eq!((ok.height(), ok.width()), (2, 3));
    let loose = GlobalPriorMap::from_values(1, 2, vec![0.0, 1.0]).unwrap();
    assert_eq!(loose.values(), [0.0, 1.0]);
    assert!(GlobalPriorMap::from_values(1, 2, vec![0.0, f64::INFINITY]).is_err());
}

#[test]
fn config_rejects_bad_threshold() {
    for t in [-0.1, 1.5, f64::NAN] {
        let cfg = DifficultyConfig {
            threshold: t,
            ..Default::default()
        };
        assert!(cfg.validate().is_err(), "threshold {t}");
    }
}

#[test]
fn modes_agree_on_radially_symmetric_axes() {
    // On the axes through the centre one of Gx, Gy vanishes, so the cross term
    // is zero in both conventions.
    let n = 9;
    let g = Tensor::from_fn(&[n, n], |i| {
        let (y, x) = ((i / n) as f64 - 4.0, (i % n) as f64 - 4.0);
        (x * x + y * y) / 40.0
    });
    let a = curvature_field(&g, 1e-8, CurvatureMode::AsWritten).unwrap();
    let s = curvature_field(&g, 1e-8, CurvatureMode::Standard).unwrap();
    for k in [2, 3, 5, 6] {
        let on_row = 4 * n + k;
        let on_col = k * n + 4;
        assert_eq!(a.kappa.data()[on_row], s.kappa.data()[on_row]);
        assert_eq!(a.kappa.data()[on_col], s.kappa.data()[on_col]);
    }
}

proptest! {
    #[test]
    fn sobel_commutes_with_transpose(h in 3usize..9, w in 3usize..9, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let m = common::uniform(&[h, w], -1.0, 1.0, &mut r);
        let (gx, gy) = sobel(&m).unwrap();
        let (tx, ty) = sobel(&transpose(&m)).unwrap();
        for (a, b) in transpose(&gx).data().iter().zip(ty.data()).chain(transpose(&gy).data().iter().zip(tx.data())) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sobel_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = common::rng(seed);
        let m = common::uniform(&[5, 6], -1.0, 1.0, &mut r);
        let n = common::uniform(&[5, 6], -1.0, 1.0, &mut r);
        let combo = m.zip_map(&n, |x, y| a * x + b * y);
        let (cx, cy) = sobel(&combo).unwrap();
        let (mx, my) = sobel(&m).unwrap();
        let (nx, ny) = sobel(&n).unwrap();
        for i in 0..30 {
            prop_assert!((cx.data()[i] - (a * mx.data()[i] + b * nx.data()[i])).abs() < 1e-12);
            prop_assert!((cy.data()[i] - (a * my.data()[i] + b * ny.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn score_is_a_probability(seed in any::<u64>(), h in 2usize..10, w in 2usize..10) {
        let mut r = common::rng(seed);
        let p = GlobalPriorMap::new(h, w, common::uniform(&[h * w], 0.0, 1.0, &mut r).into_data()).unwrap();
        for mode in [CurvatureMode::AsWritten, CurvatureMode::Standard] {
            let v = difficulty::assess(&p, &DifficultyConfig { mode, ..Default::default() }).unwrap();
            prop_assert!((0.0..=1.0).contains(&v.score));
            prop_assert_eq!(v.label == DifficultyLabel::Hard, v.score >= 0.5);
        }
    }

    #[test]
    fn label_monotone_in_threshold(s in 0.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if classify(s, hi).label == DifficultyLabel::Hard {
            prop_assert_eq!(classify(s, lo).label, DifficultyLabel::Hard);
        }
    }
}
