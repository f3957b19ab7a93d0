mod support;

use cropformer::eval::{
    average_precision, band_width, band_within, boundary_ap, boundary_band, boundary_iou, coco_thresholds,
    consistency, dataset_stats, shape_stats, Annotation, ImageEval, Prediction,
};
use cropformer::{mask_iou, Mask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

/// Small image of blocky entities: `gt` disjoint 2x2 blocks on a 6x6 grid,
/// predictions are random unions of blocks with distinct scores.
fn tiny_image(n_gt: usize, n_pred: usize, rng: &mut ChaCha8Rng) -> ImageEval {
    let block = |b: usize| rect_mask(12, 12, (b % 6) * 2, (b / 6) * 2, (b % 6) * 2 + 2, (b / 6) * 2 + 2);
    let mut cells: Vec<usize> = (0..36).collect();
    for i in (1..36).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let gt: Vec<Mask> = (0..n_gt)
        .map(|k| {
            // each entity is one to three neighbouring-ish blocks
            let mut m = block(cells[3 * k]);
            for j in 1..rng.random_range(1..=3) {
                m = m.or(&block(cells[3 * k + j])).unwrap();
            }
            m
        })
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            let mut m = if !gt.is_empty() && rng.random_bool(0.7) {
                gt[rng.random_range(0..gt.len())].clone()
            } else {
                block(rng.random_range(0..36))
            };
            if rng.random_bool(0.5) {
                m = m.or(&block(rng.random_range(0..36))).unwrap();
            }
            Prediction {
                score: rng.random_range(0.01..0.99),
                mask: m,
            }
        })
        .collect();
    ImageEval { gt, preds }
}

#[test]
fn ap_matches_enumeration_on_every_small_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for n_gt in 0..=5 {
        for n_pred in 0..=5 {
            for _ in 0..6 {
                let corpus = vec![tiny_image(n_gt, n_pred, &mut rng), tiny_image(n_pred.min(3), n_gt, &mut rng)];
                for t in [0.5, 0.75, 0.95] {
                    let fast = average_precision(&corpus, &[t]).unwrap().ap;
                    let slow = ap_bruteforce(&corpus, t, iou_naive);
                    assert!((fast - slow).abs() < 1e-6, "gt {n_gt} pred {n_pred} t {t}: {fast} vs {slow}");
                }
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 216);
}

#[test]
fn hand_case_two_gt_one_exact_prediction() {
    let a = rect_mask(8, 8, 0, 0, 4, 4);
    let b = rect_mask(8, 8, 4, 4, 8, 8);
    let corpus = vec![ImageEval {
        gt: vec![a.clone(), b],
        preds: vec![Prediction { score: 0.9, mask: a }],
    }];
    let ap = average_precision(&corpus, &[0.5]).unwrap().ap;
    // recall points 0.00..=0.50 see precision 1: 51 of 101
    assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    assert!((ap - ap_bruteforce(&corpus, 0.5, iou_naive)).abs() < 1e-12);
    assert!((ap - 0.5).abs() <= 0.5 / 101.0 + 1e-12);
}

#[test]
fn trivial_ap_cases() {
    let a = rect_mask(8, 8, 0, 0, 4, 4);
    let b = rect_mask(8, 8, 4, 0, 8, 8);
    let perfect = vec![ImageEval {
        gt: vec![a.clone(), b.clone()],
        preds: vec![
            Prediction { score: 0.2, mask: a.clone() },
            Prediction { score: 0.7, mask: b.clone() },
        ],
    }];
    let t = coco_thresholds();
    assert_eq!(average_precision(&perfect, &t).unwrap().ap, 1.0);
    assert_eq!(boundary_ap(&perfect, &t, 0.02).unwrap().ap, 1.0);
    let none = vec![ImageEval { gt: vec![a], preds: vec![] }];
    assert_eq!(average_precision(&none, &t).unwrap().ap, 0.0);
    assert!(boundary_ap(&perfect, &t, 0.0).is_err());
    assert!(boundary_ap(&perfect, &t, 0.2).is_err());
}

#[test]
fn boundary_ap_matches_enumeration_with_brute_force_bands() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let corpus = vec![tiny_image(rng.random_range(1..=5), rng.random_range(0..=5), &mut rng)];
        let d = band_width(12, 12, 0.1);
        let biou = |p: &Mask, g: &Mask| iou_naive(&band_bruteforce(p, d), &band_bruteforce(g, d));
        for t in [0.5, 0.7] {
            let fast = boundary_ap(&corpus, &[t], 0.1).unwrap().ap;
            let slow = ap_bruteforce(&corpus, t, biou);
            assert!((fast - slow).abs() < 1e-6);
        }
    }
}

#[test]
fn band_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..40 {
        let (w, h) = (rng.random_range(1..30), rng.random_range(1..30));
        let m = random_mask(w, h, rng.random_range(0.3..0.95), &mut rng);
        let d = rng.random_range(1..6);
        assert_eq!(band_within(&m, d), band_bruteforce(&m, d));
    }
    let disk = disk_mask(96, 96, 48.0, 48.0, 40.0);
    let annulus = disk.and(&Mask::from_fn(96, 96, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - 48.0, y as f64 + 0.5 - 48.0);
        dx * dx + dy * dy > 25.0 * 25.0
    }))
    .unwrap();
    let d = band_width(96, 96, 0.05);
    let expect = iou_naive(&band_bruteforce(&disk, d), &band_bruteforce(&annulus, d));
    assert!((boundary_iou(&disk, &annulus, 0.05).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn boundary_iou_properties() {
    // thin shapes lie entirely inside their band: boundary IoU is mask IoU
    let a = rect_mask(200, 200, 10, 10, 150, 14);
    let b = rect_mask(200, 200, 20, 11, 170, 15);
    let d = band_width(200, 200, 0.02);
    assert!(d >= 3);
    assert_eq!(boundary_band(&a, 0.02), a);
    assert_eq!(boundary_iou(&a, &b, 0.02).unwrap(), mask_iou(&a, &b).unwrap());
    // same-area squares further apart than the band: zero
    let p = rect_mask(200, 200, 0, 0, 40, 40);
    let q = rect_mask(200, 200, 120, 120, 160, 160);
    assert_eq!(boundary_iou(&p, &q, 0.02).unwrap(), 0.0);
    assert_eq!(boundary_iou(&p, &p, 0.02).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_ignores_monotone_score_rescaling(seed in 0u64..10_000, power in 0.2f64..5.0, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus: Vec<ImageEval> = (0..3).map(|_| {
            let (g, p) = (rng.random_range(0..=5), rng.random_range(0..=5));
            tiny_image(g, p, &mut rng)
        }).collect();
        let rescaled: Vec<ImageEval> = corpus.iter().map(|img| ImageEval {
            gt: img.gt.clone(),
            preds: img.preds.iter().map(|p| Prediction {
                score: 1.0 / (1.0 + (-(p.score.powf(power) * 4.0 + shift)).exp()),
                mask: p.mask.clone(),
            }).collect(),
        }).collect();
        let t = coco_thresholds();
        let a = average_precision(&corpus, &t).unwrap();
        let b = average_precision(&rescaled, &t).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn boundary_iou_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(20, 17, 0.6, &mut rng);
        let b = random_mask(20, 17, 0.6, &mut rng);
        let v = boundary_iou(&a, &b, 0.05).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn shape_metrics_of_disks_and_squares() {
    let mut prev = 0.0;
    for r in [64.0, 128.0, 256.0, 512.0] {
        let side = (2.0 * r) as usize + 8;
        let c = side as f64 / 2.0;
        let s = shape_stats(&disk_mask(side, side, c, c, r)).unwrap();
        assert!(s.convexity >= 0.95 && s.simplicity >= 0.95, "r {r}: {s:?}");
        assert!(s.simplicity <= 1.0 && s.convexity <= 1.0);
        assert!(s.simplicity >= prev - 1e-3, "simplicity should not fall with radius");
        prev = s.simplicity;
    }
    for side in [256, 300] {
        let s = shape_stats(&rect_mask(side + 4, side + 4, 2, 2, side + 2, side + 2)).unwrap();
        assert_eq!(s.convexity, 1.0);
        assert!((s.simplicity - std::f64::consts::FRAC_PI_4).abs() < 0.02, "{s:?}");
    }
    assert!(shape_stats(&Mask::new(4, 4)).is_err());
}

#[test]
fn plus_sign_convexity_matches_polygon_oracle() {
    // cross of two 3:1 bars, unit 40 px
    let u = 40.0;
    let o = 10.0;
    let pts = vec![
        (o + u, o),
        (o + 2.0 * u, o),
        (o + 2.0 * u, o + u),
        (o + 3.0 * u, o + u),
        (o + 3.0 * u, o + 2.0 * u),
        (o + 2.0 * u, o + 2.0 * u),
        (o + 2.0 * u, o + 3.0 * u),
        (o + u, o + 3.0 * u),
        (o + u, o + 2.0 * u),
        (o, o + 2.0 * u),
        (o, o + u),
        (o + u, o + u),
    ];
    let exact = polygon_area(&pts) / polygon_area(&convex_hull(pts.clone()));
    assert!((exact - 5.0 / 7.0).abs() < 1e-12);
    let s = shape_stats(&polygon_mask(140, 140, &pts)).unwrap();
    assert!((s.convexity - exact).abs() < 0.02, "{} vs {exact}", s.convexity);
}

#[test]
fn convex_polygons_are_nearly_convex_when_rasterised() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let side = rng.random_range(64..160);
        let c = side as f64 / 2.0;
        let pts: Vec<(f64, f64)> = (0..rng.random_range(3..9))
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (c + 0.45 * side as f64 * a.cos(), c + 0.45 * side as f64 * a.sin())
            })
            .collect();
        let hull = convex_hull(pts);
        let m = polygon_mask(side, side, &hull);
        if m.area() < side * side / 20 {
            continue;
        }
        let s = shape_stats(&m).unwrap();
        assert!(s.convexity >= 0.9, "{s:?}");
    }
}

#[test]
fn dataset_statistics() {
    let mk = |n: usize| Annotation {
        width: 40,
        height: 10,
        masks: (0..n).map(|k| rect_mask(40, 10, 10 * k, 0, 10 * k + 10, 10)).collect(),
    };
    let s = dataset_stats(&[mk(2), mk(3), mk(4)]).unwrap();
    assert_eq!(s.entity_count_mean, 3.0);
    assert_eq!(s.entity_count_max, 4);
    assert_eq!(s.images, 3);
    let full = dataset_stats(&[mk(4)]).unwrap();
    assert_eq!(full.valid_area, 1.0);
    let disks: Vec<Annotation> = (0..3)
        .map(|k| Annotation {
            width: 300,
            height: 300,
            masks: vec![disk_mask(300, 300, 150.0, 150.0, 100.0 + 20.0 * k as f64)],
        })
        .collect();
    let d = dataset_stats(&disks).unwrap();
    assert!(d.complexity > 0.97 && d.simplicity > 0.97, "{d:?}");
    assert!(dataset_stats(&[]).is_err());
}

#[test]
fn annotation_consistency() {
    let a = Annotation {
        width: 20,
        height: 20,
        masks: vec![rect_mask(20, 20, 0, 0, 10, 10), rect_mask(20, 20, 10, 10, 20, 20)],
    };
    let b = Annotation {
        width: 20,
        height: 20,
        masks: vec![rect_mask(20, 20, 10, 0, 20, 10), rect_mask(20, 20, 0, 10, 10, 20)],
    };
    assert_eq!(consistency(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 100.0);
    assert_eq!(consistency(std::slice::from_ref(&a), &[b]).unwrap(), 0.0);
    assert!(consistency(std::slice::from_ref(&a), &[]).is_err());
}
