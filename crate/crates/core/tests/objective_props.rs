use betaat::models::argmax;
use betaat::objectives::{
    cross_entropy, entropy, lambda_star, lse_smoothed_margin, max_margin_over_classes, zero_one_error, LogBase,
    MarginVector, SmoothingConfig,
};
use proptest::prelude::*;

fn logits_and_class() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..12).prop_flat_map(|k| (prop::collection::vec(-20.0f64..20.0, k), 0..k))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn base_two_cross_entropy_bounds_zero_one((z, y) in logits_and_class()) {
        let ce = cross_entropy(&z, y, LogBase::Two).unwrap();
        prop_assert!(ce >= f64::from(zero_one_error(&z, y).unwrap()));
    }

    #[test]
    fn margin_sign_decides_error((z, y) in logits_and_class()) {
        let (_, m) = max_margin_over_classes(&z, y).unwrap();
        let err = zero_one_error(&z, y).unwrap();
        if m > 0.0 {
            prop_assert_eq!(err, 1);
        } else if m < 0.0 {
            prop_assert_eq!(err, 0);
        } else {
            prop_assert_eq!(err == 1, argmax(&z) != y);
        }
    }

    #[test]
    fn smoothed_margin_sandwich((z, y) in logits_and_class()) {
        let m = MarginVector::from_logits(&z, y).unwrap();
        let k = z.len() as f64;
        for mu in [1.0, 10.0, 100.0] {
            let s = lse_smoothed_margin(&m, SmoothingConfig::new(mu).unwrap()).unwrap();
            let top = m.max_off_true();
            prop_assert!(top <= s + 1e-12);
            prop_assert!(s <= top + (k - 1.0).ln() / mu + 1e-12);
        }
    }

    #[test]
    fn optimal_weights_and_duality((z, y) in logits_and_class(), mu in 0.1f64..100.0) {
        let m = MarginVector::from_logits(&z, y).unwrap();
        let cfg = SmoothingConfig::new(mu).unwrap();
        let lam = lambda_star(&m, cfg).unwrap();
        prop_assert_eq!(lam[y], 0.0);
        prop_assert!(lam.iter().all(|&l| l >= 0.0));
        prop_assert!((lam.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let dual: f64 = lam.iter().zip(m.values()).map(|(l, v)| l * v).sum::<f64>() + entropy(&lam) / mu;
        let lse = lse_smoothed_margin(&m, cfg).unwrap();
        prop_assert!((dual - lse).abs() < 1e-9 * lse.abs().max(1.0), "{} vs {}", dual, lse);
    }
}

#[test]
fn cross_entropy_prefers_the_wrong_point_where_margin_does_not() {
    // Ten classes, true class first.
    let eps = 0.01;
    let mut za = vec![0.11, 0.11 - 2.0 * eps];
    za.extend(std::iter::repeat_n(0.11 - eps, 8));
    let mut zb = vec![0.49, 0.49 + 2.0 * eps];
    zb.extend(std::iter::repeat_n((1.0 - 0.98 - 2.0 * eps) / 8.0, 8));
    let ce = |z: &[f64]| -z[0].ln();
    assert!((ce(&za) - 2.20727).abs() < 1e-5);
    assert!((ce(&zb) - 0.71335).abs() < 1e-5);
    assert!(ce(&za) > ce(&zb));
    let (_, ma) = max_margin_over_classes(&za, 0).unwrap();
    let (jb, mb) = max_margin_over_classes(&zb, 0).unwrap();
    assert!(ma < 0.0 && mb > 0.0 && ma < mb);
    assert_eq!(jb, 1);
    assert!((mb - 0.02).abs() < 1e-12);
}
