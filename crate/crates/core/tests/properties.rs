mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use wsdet_core::dataset::{generate_synthetic, split_partial, SyntheticConfig};
use wsdet_core::metrics::{froc, match_detections, mean_average_precision, recall_at_fppi, EvalSet};
use wsdet_core::toydet::{benchmark_data, train, TrainConfig};
use wsdet_core::{cam_to_boxes, iou, CamBoxConfig, Error, Source};

fn eval_set(images: &[RefImage], remap: impl Fn(f64) -> f64, copies: usize) -> EvalSet {
    let mut set = EvalSet::new();
    for (i, img) in images.iter().enumerate() {
        let id = format!("img-{i}");
        set.add_image(id.clone());
        for g in &img.gts {
            set.add_ground_truth(id.clone(), *g);
        }
        for _ in 0..copies {
            for &(s, b) in &img.dets {
                set.add_detection(&id, det(remap(s), b, Source::Teacher)).unwrap();
            }
        }
    }
    set
}

proptest! {
    #[test]
    fn ap_matches_threshold_enumeration(seed in any::<u64>()) {
        let images = random_eval_images(&mut ChaCha8Rng::seed_from_u64(seed), 20, true);
        let ap = mean_average_precision(&eval_set(&images, |s| s, 1), 0.2).unwrap();
        prop_assert!((ap - ap_oracle(&images, 0.2)).abs() < 1e-9);
    }

    #[test]
    fn froc_matches_threshold_enumeration_with_ties(seed in any::<u64>()) {
        let images = random_eval_images(&mut ChaCha8Rng::seed_from_u64(seed), 20, false);
        let curve = froc(&eval_set(&images, |s| s, 1), 0.2).unwrap();
        let want = froc_oracle(&images, 0.2);
        prop_assert_eq!(curve.points(), want.as_slice());
    }

    /// Holds when every duplicate is a false positive, i.e. no detection
    /// reaches the IoU threshold with two ground truths (see
    /// `duplicate_may_claim_a_second_truth`).
    #[test]
    fn duplicates_never_raise_ap(seed in any::<u64>()) {
        let images = random_eval_images(&mut ChaCha8Rng::seed_from_u64(seed), 20, false);
        let ambiguous = images.iter().any(|img| {
            img.dets
                .iter()
                .any(|(_, b)| img.gts.iter().filter(|g| iou_ref(b, g) >= 0.2).count() > 1)
        });
        prop_assume!(!ambiguous);
        let once = mean_average_precision(&eval_set(&images, |s| s, 1), 0.2).unwrap();
        let twice = mean_average_precision(&eval_set(&images, |s| s, 2), 0.2).unwrap();
        prop_assert!(twice <= once + 1e-12);
    }

    #[test]
    fn monotone_score_remap_is_invisible(seed in any::<u64>()) {
        let images = random_eval_images(&mut ChaCha8Rng::seed_from_u64(seed), 20, false);
        let a = eval_set(&images, |s| s, 1);
        let b = eval_set(&images, |s| s * s * s, 1);
        prop_assert_eq!(mean_average_precision(&a, 0.2).unwrap(), mean_average_precision(&b, 0.2).unwrap());
        let (ca, cb) = (froc(&a, 0.2).unwrap(), froc(&b, 0.2).unwrap());
        prop_assert_eq!(ca.points(), cb.points());
        prop_assert_eq!(recall_at_fppi(&ca, 0.5).unwrap(), recall_at_fppi(&cb, 0.5).unwrap());
    }

    #[test]
    fn recall_at_fppi_is_monotone(seed in any::<u64>(), lo in 0.0f64..3.0, extra in 0.0f64..3.0) {
        let images = random_eval_images(&mut ChaCha8Rng::seed_from_u64(seed), 20, false);
        let curve = froc(&eval_set(&images, |s| s, 1), 0.2).unwrap();
        prop_assert!(recall_at_fppi(&curve, lo).unwrap() <= recall_at_fppi(&curve, lo + extra).unwrap());
    }

    #[test]
    fn each_ground_truth_matches_at_most_once(seed in any::<u64>()) {
        let images = random_eval_images(&mut ChaCha8Rng::seed_from_u64(seed), 20, false);
        for img in &images {
            let dets: Vec<_> = img.dets.iter().map(|&(s, b)| det(s, b, Source::Teacher)).collect();
            let flags = match_detections(&img.gts, &dets, 0.2);
            prop_assert!(flags.iter().filter(|&&f| f).count() <= img.gts.len());
        }
    }

    #[test]
    fn nms_matches_reference(seed in any::<u64>(), tau in prop::sample::select(vec![0.0, 0.1, 0.2, 0.5, 0.99, 1.0])) {
        let dets = random_detections(&mut ChaCha8Rng::seed_from_u64(seed), 12, Source::Cam);
        prop_assert_eq!(wsdet_core::nms(&dets, tau), nms_ref(&dets, tau));
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>()) {
        let case = GradCase::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let err = max_relative_error(&case.analytic(), &case.numeric(1e-5), 1e-7);
        prop_assert!(err < 1e-4, "relative error {err:e}");
    }
}

#[test]
fn duplicate_may_claim_a_second_truth() {
    // `wide` overlaps both truths; its copy takes the second one ahead of
    // the lower-scored detection that matched it before.
    let (g0, g1) = (bx(0.0, 0.0, 10.0, 10.0), bx(10.0, 0.0, 20.0, 10.0));
    let wide = bx(2.0, 0.0, 18.0, 10.0);
    let images = [RefImage {
        gts: vec![g0, g1],
        dets: vec![(0.9, wide), (0.5, bx(30.0, 0.0, 40.0, 10.0)), (0.4, g1)],
    }];
    let once = mean_average_precision(&eval_set(&images, |s| s, 1), 0.2).unwrap();
    let twice = mean_average_precision(&eval_set(&images, |s| s, 2), 0.2).unwrap();
    assert!((once - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12, "{once}");
    assert_eq!(twice, 1.0);
    assert_eq!(twice, ap_oracle(&[RefImage { dets: [images[0].dets.clone(), images[0].dets.clone()].concat(), ..images[0].clone() }], 0.2));
}

#[test]
fn generator_cams_recover_planted_blobs() {
    let config = SyntheticConfig::low_noise();
    let cam = CamBoxConfig::for_image(config.width, config.height);
    let records = generate_synthetic(200, 5, &config).unwrap();
    let (mut planted, mut found) = (0, 0);
    for r in &records {
        let boxes = cam_to_boxes(r.heatmap.as_ref().unwrap(), &cam, 1.0).unwrap();
        for gt in r.boxes() {
            planted += 1;
            if boxes.iter().any(|d| iou(&d.bbox, gt) >= 0.2) {
                found += 1;
            }
        }
    }
    assert!(planted > 100, "only {planted} blobs planted");
    let rate = found as f64 / planted as f64;
    assert!(rate >= 0.9, "recovered {found} of {planted} ({rate:.3})");
}

#[test]
fn split_ratios_partition_the_ids() {
    let records = generate_synthetic(64, 2, &SyntheticConfig::default()).unwrap();
    for ratio in [1.0 / 16.0, 1.0 / 8.0, 0.25, 0.5, 0.75, 1.0] {
        let split = split_partial(&records, ratio, 9).unwrap();
        assert_eq!(split.fully.len(), (ratio * 64.0) as usize);
        let mut ids: Vec<&str> = split
            .fully
            .iter()
            .chain(&split.weakly)
            .map(|r| r.image_id.as_str())
            .collect();
        ids.sort();
        let mut want: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        want.sort();
        assert_eq!(ids, want);
        assert!(split.weakly.iter().all(|r| r.boxes().is_empty()));
    }
}

#[test]
fn zero_epochs_returns_initial_models() {
    let config = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (data, test) = benchmark_data(&config).unwrap();
    let report = train(&config, &data, &test).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.teacher, report.initial);
    assert_eq!(report.student, report.initial);
}

#[test]
fn training_is_reproducible() {
    let config = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let (data, test) = benchmark_data(&config).unwrap();
    let a = train(&config, &data, &test).unwrap();
    let b = train(&config, &data, &test).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.teacher, b.teacher);
}

#[test]
fn invalid_config_lists_every_problem() {
    let config = TrainConfig {
        alpha: 1.5,
        lr: -1.0,
        batch_size: 0,
        tau_nms: 2.0,
        ..TrainConfig::default()
    };
    match config.validate().unwrap_err() {
        Error::InvalidConfig(problems) => {
            let text = problems.join("\n");
            for field in ["alpha", "lr", "batch_size", "tau_nms"] {
                assert!(text.contains(field), "{field} missing from {text}");
            }
        }
        e => panic!("unexpected error {e}"),
    }
}
