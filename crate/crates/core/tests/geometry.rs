mod support;

use cropformer::geometry::{
    build_training_batch, choose_corner, crop_region, full_to_view, map_view_to_full, rasterize_view_gt,
    resize_bilinear, view_to_full, Corner, CropSet, CropSpec, Entity, GroundTruthScene, MultiViewBatch, Rect,
};
use cropformer::Raster;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::rect_mask;

fn corners(delta: f64, w: usize, h: usize) -> Vec<Rect> {
    Corner::FIXED
        .iter()
        .map(|&c| crop_region(CropSpec::new(c, delta).unwrap(), w, h).unwrap())
        .collect()
}

fn ramp(w: usize, h: usize) -> Raster {
    Raster::from_fn(w, h, 2, |x, y, c| if c == 0 { 0.01 * x as f32 + 0.002 * y as f32 } else { 0.5 - 0.003 * y as f32 })
}

proptest! {
    #[test]
    fn view_and_full_coordinates_round_trip(
        w in 8usize..3000, h in 8usize..3000, delta in 0.05f64..1.0, k in 0usize..4,
        view in 2usize..512, fu in 0.0f64..1.0, fv in 0.0f64..1.0,
    ) {
        let rect = crop_region(CropSpec::new(Corner::FIXED[k], delta).unwrap(), w, h).unwrap();
        prop_assume!(rect.width() > 1 && rect.height() > 1);
        let (u, v) = (fu * (view - 1) as f64, fv * (view - 1) as f64);
        let (x, y) = view_to_full(rect, view, view, u, v);
        prop_assert!(x >= rect.x0 as f64 - 1e-9 && x <= (rect.x1 - 1) as f64 + 1e-9);
        prop_assert!(y >= rect.y0 as f64 - 1e-9 && y <= (rect.y1 - 1) as f64 + 1e-9);
        let (u2, v2) = full_to_view(rect, view, view, x, y);
        prop_assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6);
        // the view's corner pixels land exactly on the rectangle's corners
        prop_assert_eq!(view_to_full(rect, view, view, 0.0, 0.0), (rect.x0 as f64, rect.y0 as f64));
        let last = (view - 1) as f64;
        prop_assert_eq!(view_to_full(rect, view, view, last, last), ((rect.x1 - 1) as f64, (rect.y1 - 1) as f64));
    }

    #[test]
    fn crop_rectangles_have_the_rounded_extent(w in 1usize..5000, h in 1usize..5000, delta in 0.01f64..=1.0) {
        for r in corners(delta, w, h) {
            prop_assert!(r.x1 <= w && r.y1 <= h);
            prop_assert_eq!(r.width(), ((delta * w as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, w));
            prop_assert_eq!(r.height(), ((delta * h as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, h));
        }
    }
}

#[test]
fn corner_coverage_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(2..400), rng.random_range(2..400));
        let delta = rng.random_range(0.05..1.0);
        let rects = corners(delta, w, h);
        let ul = rects[0];
        let br = rects[3];
        // per axis a pixel is inside the leading crop, the trailing crop, or both
        let along = |p: usize, lead: usize, trail: usize| (p < lead) as usize + (p >= trail) as usize;
        for y in 0..h {
            for x in 0..w {
                let count = rects.iter().filter(|r| r.contains(x, y)).count();
                assert_eq!(count, along(x, ul.x1, br.x0) * along(y, ul.y1, br.y0));
                if delta >= 0.5 {
                    assert!(count >= 1, "({x}, {y}) uncovered at {delta} for {w}x{h}");
                }
            }
        }
    }
}

#[test]
fn corners_are_disjoint_below_half() {
    for (w, h) in [(100, 100), (101, 57), (1024, 1024)] {
        let rects = corners(0.45, w, h);
        for i in 0..4 {
            for j in i + 1..4 {
                let (a, b) = (rects[i], rects[j]);
                let overlap_x = a.x0.max(b.x0) < a.x1.min(b.x1);
                let overlap_y = a.y0.max(b.y0) < a.y1.min(b.y1);
                assert!(!(overlap_x && overlap_y), "{a:?} {b:?}");
            }
        }
    }
}

#[test]
fn crop_area_scales_with_the_square_of_the_ratio() {
    let r = crop_region(CropSpec::new(Corner::BottomRight, 0.7).unwrap(), 1000, 1000).unwrap();
    assert_eq!(r.area(), 490_000);
    assert_eq!(r, Rect { x0: 300, y0: 300, x1: 1000, y1: 1000 });
    assert_eq!(crop_region(CropSpec::full(), 37, 5).unwrap(), Rect { x0: 0, y0: 0, x1: 37, y1: 5 });
}

#[test]
fn entity_straddling_a_crop_edge_is_cut_in_half() {
    let scene = GroundTruthScene {
        width: 100,
        height: 100,
        entities: vec![
            Entity { id: 1, mask: rect_mask(100, 100, 40, 10, 60, 30) },
            Entity { id: 2, mask: rect_mask(100, 100, 70, 70, 90, 90) },
        ],
    };
    scene.validate().unwrap();
    let spec = CropSpec::new(Corner::UpperLeft, 0.5).unwrap();
    let gt = rasterize_view_gt(&scene, spec, 50, 50).unwrap();
    assert_eq!(gt.present, vec![true, false]);
    assert_eq!(gt.masks[0], rect_mask(50, 50, 40, 10, 50, 30));
    assert_eq!(gt.masks[0].area() * 2, 400);
    assert!(gt.masks[1].is_empty());
    // views at a coarser size keep the same fraction up to one sample row
    let coarse = rasterize_view_gt(&scene, spec, 25, 25).unwrap();
    let frac = coarse.masks[0].area() as f64 / (25.0 * 25.0);
    assert!((frac - 200.0 / 2500.0).abs() < 0.02, "{frac}");
}

#[test]
fn affine_images_survive_a_view_round_trip() {
    let (w, h) = (173, 131);
    let img = ramp(w, h);
    for delta in [0.5, 0.7, 1.0] {
        for &c in &Corner::FIXED {
            let spec = CropSpec::new(c, delta).unwrap();
            let rect = crop_region(spec, w, h).unwrap();
            let view = resize_bilinear(&img.crop(rect.x0, rect.y0, rect.x1, rect.y1), 64, 64);
            let (back, cover) = map_view_to_full(spec, &view, w, h).unwrap();
            assert_eq!(cover.area(), rect.area());
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for ch in 0..2 {
                        assert!((back.get(x, y, ch) - img.get(x, y, ch)).abs() < 1e-4);
                    }
                }
            }
        }
    }
}

#[test]
fn training_batches_draw_every_corner() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = [0usize; 4];
    for _ in 0..400 {
        let c = choose_corner(&mut rng);
        seen[Corner::FIXED.iter().position(|&k| k == c).unwrap()] += 1;
    }
    assert!(seen.iter().all(|&n| n > 60), "{seen:?}");

    let img = ramp(40, 30);
    let scene = GroundTruthScene {
        width: 40,
        height: 30,
        entities: vec![Entity { id: 3, mask: rect_mask(40, 30, 0, 0, 10, 10) }],
    };
    let mut corners_seen = std::collections::HashSet::new();
    for _ in 0..64 {
        let (batch, gt) = build_training_batch(&img, &scene, 0.7, 16, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(gt.len(), 2);
        assert_eq!(batch.views[0].spec, CropSpec::full());
        assert!(batch.views.iter().all(|v| v.raster.width == 16 && v.raster.height == 16));
        assert!(gt.iter().all(|g| g.masks[0].width() == 8));
        corners_seen.insert(batch.views[1].spec.corner.label());
    }
    assert_eq!(corners_seen.len(), 4);
    assert!(build_training_batch(&img, &scene, 1.0, 16, 8, &mut rng).is_err());
    assert!(build_training_batch(&Raster::new(3, 3, 3), &scene, 0.5, 16, 8, &mut rng).is_err());
}

#[test]
fn random_crops_stay_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let spec = CropSet::Random.sample(0.6, &mut rng).unwrap();
        let r = crop_region(spec, 321, 123).unwrap();
        assert!(r.x1 <= 321 && r.y1 <= 123);
        assert_eq!((r.width(), r.height()), (193, 74));
    }
    assert!(CropSet::Fixed8.sample(0.6, &mut rng).is_err());
    assert!(CropSet::parse("fixed9").is_err());
}

#[test]
fn view_zero_must_be_full() {
    let img = ramp(20, 20);
    let spec = CropSpec::new(Corner::UpperLeft, 0.5).unwrap();
    assert!(MultiViewBatch::build(&img, &[spec], 8, 8).is_err());
    let b = MultiViewBatch::build(&img, &CropSpec::inference_set(0.5).unwrap(), 8, 8).unwrap();
    assert_eq!(b.len(), 5);
    assert_eq!(b.views[4].rect, Rect { x0: 10, y0: 10, x1: 20, y1: 20 });
}
