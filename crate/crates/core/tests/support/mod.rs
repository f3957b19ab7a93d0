//! Independent slow oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use cropformer::eval::{ImageEval, Prediction};
use cropformer::Mask;
use rand::Rng;

/// IoU by direct pixel counting.
pub fn iou_naive(a: &Mask, b: &Mask) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for k in 0..a.len() {
        let (x, y) = (a.get_index(k), b.get_index(k));
        i += (x && y) as usize;
        u += (x || y) as usize;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// AP at one IoU threshold by enumeration: for every cut of the global
/// score ranking, the matched set is rebuilt from scratch (each image's
/// detections, best first, take the unmatched ground truth of highest IoU
/// reaching the threshold); precision at recall `r` is the largest precision
/// over cuts whose recall reaches `r`, averaged over 101 recall points.
/// Scores must be distinct.
pub fn ap_bruteforce(corpus: &[ImageEval], threshold: f64, overlap: impl Fn(&Mask, &Mask) -> f64) -> f64 {
    let gt_total: usize = corpus.iter().map(|i| i.gt.len()).sum();
    if gt_total == 0 {
        return 0.0;
    }
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (i, img) in corpus.iter().enumerate() {
        for d in 0..img.preds.len() {
            all.push((i, d));
        }
    }
    all.sort_by(|a, b| corpus[b.0].preds[b.1].score.total_cmp(&corpus[a.0].preds[a.1].score));
    let mut points = Vec::new();
    for cut in 1..=all.len() {
        let kept = &all[..cut];
        let mut tp = 0;
        for (i, img) in corpus.iter().enumerate() {
            let mut mine: Vec<&Prediction> = kept.iter().filter(|k| k.0 == i).map(|k| &img.preds[k.1]).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut used = vec![false; img.gt.len()];
            for p in mine {
                let mut best: Option<(usize, f64)> = None;
                for (g, gm) in img.gt.iter().enumerate() {
                    let o = overlap(&p.mask, gm);
                    if !used[g] && o >= threshold && best.is_none_or(|(_, b)| o >= b) {
                        best = Some((g, o));
                    }
                }
                if let Some((g, _)) = best {
                    used[g] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / gt_total as f64, tp as f64 / cut as f64));
    }
    (0..101)
        .map(|k| {
            let r = k as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Pixels of `mask` within Euclidean distance `d` of a background pixel,
/// where everything outside the image is background; checked pixel by pixel.
pub fn band_bruteforce(mask: &Mask, d: usize) -> Mask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let di = d as i64;
    Mask::from_fn(mask.width(), mask.height(), |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let (x, y) = (x as i64, y as i64);
        for dy in -di..=di {
            for dx in -di..=di {
                if dx * dx + dy * dy > di * di {
                    continue;
                }
                let (u, v) = (x + dx, y + dy);
                if u < 0 || v < 0 || u >= w || v >= h || !mask.get(u as usize, v as usize) {
                    return true;
                }
            }
        }
        false
    })
}

/// Minimum assignment cost by trying every injective map of the smaller side.
pub fn assignment_bruteforce(cost: &[f64], rows: usize, cols: usize) -> f64 {
    let (r, c, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if rows <= cols {
        (rows, cols, Box::new(|i, j| cost[i * cols + j]))
    } else {
        (cols, rows, Box::new(|i, j| cost[j * cols + i]))
    };
    fn go(i: usize, r: usize, c: usize, used: &mut Vec<bool>, acc: f64, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == r {
            return acc;
        }
        let mut best = f64::INFINITY;
        for j in 0..c {
            if !used[j] {
                used[j] = true;
                best = best.min(go(i + 1, r, c, used, acc + at(i, j), at));
                used[j] = false;
            }
        }
        best
    }
    go(0, r, c, &mut vec![false; c], 0.0, &*at)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matching cost written out term by term with scalar loops.
pub fn match_cost_scalar(entity: &[f32], masks: &[f32], gts: &[&Mask], w: (f64, f64, f64)) -> Vec<f64> {
    let n = entity.len();
    let pixels = gts[0].len();
    let mut out = Vec::new();
    for q in 0..n {
        for g in gts {
            let mut bce = 0.0;
            let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
            for i in 0..pixels {
                let x = masks[q * pixels + i] as f64;
                let t = if g.get_index(i) { 1.0 } else { 0.0 };
                let p = sigmoid(x);
                bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                inter += p * t;
                psum += p;
                tsum += t;
            }
            bce /= pixels as f64;
            let dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
            let ce = 1.0 - sigmoid(entity[q] as f64);
            out.push(w.0 * ce + w.1 * bce + w.2 * dice);
        }
    }
    out
}

/// Random mask with roughly `density` of its pixels set.
pub fn random_mask(w: usize, h: usize, density: f64, rng: &mut impl Rng) -> Mask {
    Mask::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// Axis-aligned filled rectangle `[x0, x1) x [y0, y1)`.
pub fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
    Mask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
}

/// Filled disk by pixel-centre test.
pub fn disk_mask(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    })
}

/// Exact area of a simple polygon (shoelace).
pub fn polygon_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Convex hull (monotone chain) of a point set.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Even-odd point-in-polygon test.
pub fn inside_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = pts.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + n - 1) % n]);
        if (a.1 > y) != (b.1 > y) && x < (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
    }
    inside
}

/// Rasterises a polygon by pixel-centre test.
pub fn polygon_mask(w: usize, h: usize, pts: &[(f64, f64)]) -> Mask {
    Mask::from_fn(w, h, |x, y| inside_polygon(pts, x as f64 + 0.5, y as f64 + 0.5))
}
