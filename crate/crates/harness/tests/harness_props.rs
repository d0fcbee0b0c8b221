use std::path::Path;

use betaat::training::EpochMetrics;
use betaat_harness::datasets::{generate_dataset, train_test_split, DatasetKind, DatasetSpec};
use betaat_harness::idx::{encode_idx, parse_idx};
use betaat_harness::report::{metrics_csv, metrics_json, parse_metrics_json, METRICS_HEADER};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = DatasetKind> {
    prop_oneof![
        Just(DatasetKind::GaussianBlobs),
        Just(DatasetKind::TwoMoons3class),
        Just(DatasetKind::XorGrid)
    ]
}

fn metrics() -> impl Strategy<Value = EpochMetrics> {
    (0.0f64..1.0, prop::option::of(0.0f64..1.0), prop::option::of(0.0f64..1.0), 0.0f64..10.0).prop_map(
        |(clean, robust, val, loss)| EpochMetrics {
            epoch: 1,
            train_clean: clean,
            train_robust: robust,
            val_clean: val,
            val_robust: robust,
            test_clean: None,
            test_robust: val,
            loss,
            seconds: None,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn idx_round_trip(n in 1usize..6, rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 56) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let (img, lab) = encode_idx(&pixels, n, rows, cols, &labels);
        let d = parse_idx(&img, &lab, Path::new("i"), Path::new("l")).unwrap();
        prop_assert_eq!(d.len(), n);
        prop_assert_eq!(d.dim(), rows * cols);
        prop_assert!(d.in_unit_box());
        for (v, &p) in d.features().data().iter().zip(&pixels) {
            prop_assert_eq!((v * 255.0).round() as u8, p);
        }
        let expected: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        prop_assert_eq!(d.labels(), expected.as_slice());
    }

    #[test]
    fn generated_data_is_boxed_balanced_and_splits_exactly(
        kind in kind(),
        n in 30usize..200,
        classes in 2usize..5,
        seed in any::<u64>(),
        fraction in 0.0f64..0.9,
    ) {
        let d = generate_dataset(&DatasetSpec { kind, n, classes, seed, ..DatasetSpec::default() }).unwrap();
        prop_assert_eq!(d.len(), n);
        prop_assert!(d.in_unit_box());
        let counts = d.class_counts();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let (train, test) = train_test_split(&d, fraction, seed).unwrap();
        let held = (fraction * n as f64).floor() as usize;
        prop_assert_eq!(test.map_or(0, |t| t.len()), held);
        prop_assert_eq!(train.len(), n - held);
    }

    #[test]
    fn reports_have_one_row_per_epoch(rows in prop::collection::vec(metrics(), 1..6)) {
        let csv = metrics_csv(&rows);
        prop_assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        prop_assert_eq!(csv.lines().count(), rows.len() + 1);
        prop_assert!(csv.lines().all(|l| l.split(',').count() == 9));
        let back = parse_metrics_json(&metrics_json(&rows)).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert!((a.loss - b.loss).abs() <= 5e-7);
            prop_assert_eq!(a.train_robust.is_some(), b.train_robust.is_some());
        }
    }
}
