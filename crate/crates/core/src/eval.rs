//! Class-agnostic mask AP, boundary AP, per-entity shape statistics and the
//! annotation-consistency protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, Mask};

pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;
pub const DEFAULT_BOUNDARY_RATIO: f64 = 0.02;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub score: f64,
    pub mask: Mask,
}

/// Ground truth and predictions for one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub gt: Vec<Mask>,
    pub preds: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over thresholds, in `[0, 1]`.
    pub ap: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

impl ApReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, ap)| ap)
    }
}

/// Which overlap measure drives matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overlap {
    Mask,
    /// Boundary IoU with band width `ratio * image diagonal`.
    Boundary { ratio: f64 },
}

/// Score-ranked predictions (stable within an image, top [`MAX_DETS`]).
fn ranked(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order.truncate(MAX_DETS);
    order
}

/// `iou[d][g]` for ranked detection `d` against ground truth `g`.
fn overlaps(img: &ImageEval, order: &[usize], overlap: Overlap) -> Result<Vec<Vec<f64>>> {
    match overlap {
        Overlap::Mask => order
            .iter()
            .map(|&d| img.gt.iter().map(|g| mask_iou(&img.preds[d].mask, g)).collect())
            .collect(),
        Overlap::Boundary { ratio } => {
            let gt_bands: Vec<Mask> = img.gt.iter().map(|g| boundary_band(g, ratio)).collect();
            order
                .iter()
                .map(|&d| {
                    let band = boundary_band(&img.preds[d].mask, ratio);
                    gt_bands.iter().map(|g| mask_iou(&band, g)).collect()
                })
                .collect()
        }
    }
}

/// Greedy matching of ranked detections: each takes the unmatched ground
/// truth of highest overlap, if that overlap reaches `threshold`.
fn greedy_tp(iou: &[Vec<f64>], gt_count: usize, threshold: f64) -> Vec<bool> {
    let thr = threshold.min(1.0 - 1e-10);
    let mut taken = vec![false; gt_count];
    iou.iter()
        .map(|row| {
            let mut best = thr;
            let mut hit = None;
            for (g, &o) in row.iter().enumerate() {
                if !taken[g] && o >= best {
                    best = o;
                    hit = Some(g);
                }
            }
            if let Some(g) = hit {
                taken[g] = true;
            }
            hit.is_some()
        })
        .collect()
}

/// 101-point interpolated precision over `(score, is_tp)` detections.
fn interpolated_ap(mut dets: Vec<(f64, bool)>, gt_total: usize) -> f64 {
    if gt_total == 0 {
        return 0.0;
    }
    // stable: ties keep image order, then within-image rank
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for &(_, hit) in &dets {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_total as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

pub fn evaluate(corpus: &[ImageEval], thresholds: &[f64], overlap: Overlap) -> Result<ApReport> {
    let gt_total: usize = corpus.iter().map(|i| i.gt.len()).sum();
    let mut per_image = Vec::with_capacity(corpus.len());
    for img in corpus {
        let order = ranked(&img.preds);
        let iou = overlaps(img, &order, overlap)?;
        per_image.push((order, iou));
    }
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let mut dets = Vec::new();
            for (img, (order, iou)) in corpus.iter().zip(&per_image) {
                let tp = greedy_tp(iou, img.gt.len(), t);
                dets.extend(order.iter().zip(tp).map(|(&d, hit)| (img.preds[d].score, hit)));
            }
            (t, interpolated_ap(dets, gt_total))
        })
        .collect();
    let ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64
    };
    Ok(ApReport { ap, per_threshold })
}

/// Class-agnostic mask AP over the given IoU thresholds.
pub fn average_precision(corpus: &[ImageEval], thresholds: &[f64]) -> Result<ApReport> {
    evaluate(corpus, thresholds, Overlap::Mask)
}

/// AP with boundary IoU; the band is `ratio` of the image diagonal wide.
pub fn boundary_ap(corpus: &[ImageEval], thresholds: &[f64], ratio: f64) -> Result<ApReport> {
    if !(ratio > 0.0 && ratio <= 0.1) {
        return Err(Error::Param(format!("boundary ratio {ratio} outside (0, 0.1]")));
    }
    evaluate(corpus, thresholds, Overlap::Boundary { ratio })
}

/// Band width in pixels for an image: `max(1, round(ratio * diagonal))`.
pub fn band_width(width: usize, height: usize, ratio: f64) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((ratio * diag).round() as usize).max(1)
}

/// Mask pixels within Euclidean distance `band_width` of a background pixel;
/// everything outside the image counts as background.
pub fn boundary_band(mask: &Mask, ratio: f64) -> Mask {
    let d = band_width(mask.width(), mask.height(), ratio);
    band_within(mask, d)
}

pub fn band_within(mask: &Mask, d: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut band = Mask::new(w, h);
    let Some((bx0, by0, bx1, by1)) = mask.bbox() else {
        return band;
    };
    // work on the bounding box plus a one-pixel background ring
    let (ww, hh) = (bx1 - bx0 + 2, by1 - by0 + 2);
    let inside = |x: usize, y: usize| -> bool {
        x >= 1 && y >= 1 && x <= ww - 2 && y <= hh - 2 && mask.get(bx0 + x - 1, by0 + y - 1)
    };
    let dist = squared_edt(ww, hh, |x, y| !inside(x, y));
    let limit = (d * d) as f64;
    for y in 1..hh - 1 {
        for x in 1..ww - 1 {
            if inside(x, y) && dist[y * ww + x] <= limit {
                band.set(bx0 + x - 1, by0 + y - 1, true);
            }
        }
    }
    band
}

/// Exact squared Euclidean distance to the nearest `seed` pixel
/// (separable lower-envelope transform).
pub fn squared_edt(w: usize, h: usize, seed: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            grid[y * w + x] = if seed(x, y) { 0.0 } else { INF };
        }
    }
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Boundary IoU of two masks with the band ratio applied to each.
pub fn boundary_iou(a: &Mask, b: &Mask, ratio: f64) -> Result<f64> {
    mask_iou(&boundary_band(a, ratio), &boundary_band(b, ratio))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    /// Area over convex-hull area.
    pub convexity: f64,
    /// Isoperimetric quotient `4 pi A / P^2`.
    pub simplicity: f64,
}

/// Moving-average window for a crack contour of `n` vertices: grows like
/// `cbrt(n)` so the staircase excess, the shrinkage of curved parts and the
/// corner cut all vanish relative to the length as resolution increases.
pub fn smoothing_window(n: usize) -> usize {
    (n as f64).cbrt().round().max(7.0) as usize | 1
}

pub fn shape_stats(mask: &Mask) -> Result<ShapeStats> {
    let area = mask.area();
    if area == 0 {
        return Err(Error::Data("shape statistics of an empty mask".into()));
    }
    let hull = hull_area(mask);
    let perimeter: f64 = crack_contours(mask)
        .iter()
        .map(|c| smoothed_length(c, smoothing_window(c.len())))
        .sum();
    let a = area as f64;
    Ok(ShapeStats {
        convexity: (a / hull).clamp(f64::MIN_POSITIVE, 1.0),
        simplicity: (4.0 * std::f64::consts::PI * a / (perimeter * perimeter)).clamp(f64::MIN_POSITIVE, 1.0),
    })
}

/// Convex hull area of all pixel corner points (pixels as unit squares).
pub fn hull_area(mask: &Mask) -> f64 {
    let w = mask.width();
    let mut pts: Vec<(i64, i64)> = Vec::new();
    let mut ranges: Vec<Option<(usize, usize)>> = vec![None; mask.height()];
    for i in mask.ones() {
        let (x, y) = (i % w, i / w);
        ranges[y] = Some(match ranges[y] {
            None => (x, x),
            Some((a, b)) => (a.min(x), b.max(x)),
        });
    }
    for (y, r) in ranges.iter().enumerate() {
        if let Some((a, b)) = *r {
            let (y, a, b) = (y as i64, a as i64, b as i64 + 1);
            pts.extend([(a, y), (a, y + 1), (b, y), (b, y + 1)]);
        }
    }
    let hull = convex_hull(pts);
    let mut twice = 0i64;
    for i in 0..hull.len() {
        let (p, q) = (hull[i], hull[(i + 1) % hull.len()]);
        twice += p.0 * q.1 - q.0 * p.1;
    }
    twice.abs() as f64 / 2.0
}

/// Monotone-chain hull, counter-clockwise, without collinear points.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    // the upper chain must not pop into the lower one
    let floor = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= floor && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Closed pixel-edge contours (outer boundaries and holes) as corner-point loops.
pub fn crack_contours(mask: &Mask) -> Vec<Vec<(i64, i64)>> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    // Directed edges keep the mask on the left; keyed by start corner.
    // dir: 0 = +x, 1 = +y, 2 = -x, 3 = -y (y grows downward)
    let cw = (w + 1) as usize;
    let key = |x: i64, y: i64| y as usize * cw + x as usize;
    let mut out_edges: std::collections::HashMap<usize, Vec<u8>> = std::collections::HashMap::new();
    let mut count = 0usize;
    for i in mask.ones() {
        let (x, y) = ((i % mask.width()) as i64, (i / mask.width()) as i64);
        // with y down, walking with the pixel on the left means clockwise on screen
        if !on(x, y - 1) {
            out_edges.entry(key(x + 1, y)).or_default().push(2);
            count += 1;
        }
        if !on(x, y + 1) {
            out_edges.entry(key(x, y + 1)).or_default().push(0);
            count += 1;
        }
        if !on(x - 1, y) {
            out_edges.entry(key(x, y)).or_default().push(1);
            count += 1;
        }
        if !on(x + 1, y) {
            out_edges.entry(key(x + 1, y + 1)).or_default().push(3);
            count += 1;
        }
    }
    let step = |x: i64, y: i64, d: u8| match d {
        0 => (x + 1, y),
        1 => (x, y + 1),
        2 => (x - 1, y),
        _ => (x, y - 1),
    };
    let mut loops = Vec::new();
    let mut used = 0usize;
    let mut starts: Vec<usize> = out_edges.keys().copied().collect();
    starts.sort_unstable();
    for s in starts {
        while let Some(d0) = out_edges.get_mut(&s).and_then(|v| v.pop()) {
            let (sx, sy) = ((s % cw) as i64, (s / cw) as i64);
            let mut pts = vec![(sx, sy)];
            let (mut x, mut y) = step(sx, sy, d0);
            let mut d = d0;
            used += 1;
            while (x, y) != (sx, sy) {
                pts.push((x, y));
                let Some(choices) = out_edges.get_mut(&key(x, y)) else {
                    break;
                };
                // at a pinch corner, turn back around the same pixel so diagonal
                // neighbours stay separate (4-connected contours)
                let left = (d + 3) % 4;
                let pick = choices
                    .iter()
                    .position(|&c| c == left)
                    .or_else(|| choices.iter().position(|&c| c == d))
                    .unwrap_or(0);
                d = choices.swap_remove(pick);
                used += 1;
                (x, y) = step(x, y, d);
            }
            loops.push(pts);
        }
    }
    debug_assert_eq!(used, count);
    loops
}

/// Length of a closed loop after a circular moving average over `window` vertices.
pub fn smoothed_length(pts: &[(i64, i64)], window: usize) -> f64 {
    let n = pts.len();
    if n < 3 || window <= 1 || n <= window {
        return polygon_length(pts.iter().map(|&(x, y)| (x as f64, y as f64)));
    }
    let half = window / 2;
    let smooth: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for k in 0..window {
                let p = pts[(i + n + k - half) % n];
                sx += p.0 as f64;
                sy += p.1 as f64;
            }
            (sx / window as f64, sy / window as f64)
        })
        .collect();
    polygon_length(smooth.into_iter())
}

fn polygon_length(pts: impl Iterator<Item = (f64, f64)>) -> f64 {
    let pts: Vec<(f64, f64)> = pts.collect();
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .sum()
}

/// One annotated image: extents plus disjoint entity masks.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    /// Mean `(width, height)`.
    pub resolution: (f64, f64),
    pub entity_count_mean: f64,
    pub entity_count_max: usize,
    pub valid_area: f64,
    /// Mean convexity (lower means more complex shapes).
    pub complexity: f64,
    pub simplicity: f64,
}

/// Corpus means of per-image statistics; shape statistics are averaged per
/// entity within an image, then over images that have entities.
pub fn dataset_stats(annotations: &[Annotation]) -> Result<DatasetStats> {
    if annotations.is_empty() {
        return Err(Error::Data("no annotations".into()));
    }
    let n = annotations.len() as f64;
    let (mut w, mut h, mut count, mut valid) = (0.0, 0.0, 0.0, 0.0);
    let (mut conv, mut simp, mut shaped) = (0.0, 0.0, 0usize);
    let mut max_count = 0;
    for a in annotations {
        w += a.width as f64;
        h += a.height as f64;
        count += a.masks.len() as f64;
        max_count = max_count.max(a.masks.len());
        let mut union = Mask::new(a.width, a.height);
        for m in &a.masks {
            union = union.or(m)?;
        }
        valid += union.area() as f64 / (a.width * a.height) as f64;
        if !a.masks.is_empty() {
            let stats = a.masks.iter().map(shape_stats).collect::<Result<Vec<_>>>()?;
            let k = stats.len() as f64;
            conv += stats.iter().map(|s| s.convexity).sum::<f64>() / k;
            simp += stats.iter().map(|s| s.simplicity).sum::<f64>() / k;
            shaped += 1;
        }
    }
    let per = shaped.max(1) as f64;
    Ok(DatasetStats {
        images: annotations.len(),
        resolution: (w / n, h / n),
        entity_count_mean: count / n,
        entity_count_max: max_count,
        valid_area: valid / n,
        complexity: conv / per,
        simplicity: simp / per,
    })
}

/// Agreement of two annotation sets of the same images, as mask AP in
/// percent: `reference` is ground truth, `other` becomes unit-score
/// predictions ranked by area (largest first).
pub fn consistency(reference: &[Annotation], other: &[Annotation]) -> Result<f64> {
    if reference.len() != other.len() {
        return Err(Error::Data(format!(
            "annotation sets cover {} and {} images",
            reference.len(),
            other.len()
        )));
    }
    let mut corpus = Vec::with_capacity(reference.len());
    for (k, (a, b)) in reference.iter().zip(other).enumerate() {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(Error::Data(format!("image {k} differs in extents between annotation sets")));
        }
        let mut preds: Vec<Prediction> = b
            .masks
            .iter()
            .map(|m| Prediction {
                score: 1.0,
                mask: m.clone(),
            })
            .collect();
        preds.sort_by_key(|p| std::cmp::Reverse(p.mask.area()));
        corpus.push(ImageEval {
            gt: a.masks.clone(),
            preds,
        });
    }
    Ok(100.0 * average_precision(&corpus, &coco_thresholds())?.ap)
}
