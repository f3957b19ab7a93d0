//! Crop views of a full image and the maps between view and full-image frames.
//!
//! Resampling uses the corner-aligned convention throughout: output index `i`
//! of an extent-`D` axis samples source coordinate `i * (S - 1) / (D - 1)`
//! (the centre `(S - 1) / 2` when `D == 1`). Corner pixels of a view land
//! exactly on corner pixels of its rectangle, so affine signals survive a
//! resize in either direction without error and the view/full coordinate
//! maps are exact inverses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Corner {
    UpperLeft,
    UpperRight,
    BottomLeft,
    BottomRight,
    Full,
    /// Free placement for random-crop training: fractions of the horizontal
    /// and vertical slack, each in `[0, 1]`.
    Offset { fx: f64, fy: f64 },
}

impl Corner {
    pub const FIXED: [Corner; 4] = [Corner::UpperLeft, Corner::UpperRight, Corner::BottomLeft, Corner::BottomRight];

    pub fn label(self) -> &'static str {
        match self {
            Corner::UpperLeft => "upper-left",
            Corner::UpperRight => "upper-right",
            Corner::BottomLeft => "bottom-left",
            Corner::BottomRight => "bottom-right",
            Corner::Full => "full",
            Corner::Offset { .. } => "offset",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub corner: Corner,
    /// Crop side over image side, per dimension.
    pub delta: f64,
}

impl CropSpec {
    pub fn new(corner: Corner, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Param(format!("crop ratio {delta} outside (0, 1]")));
        }
        if corner == Corner::Full && delta != 1.0 {
            return Err(Error::Param(format!("full view needs ratio 1, got {delta}")));
        }
        if let Corner::Offset { fx, fy } = corner {
            if !((0.0..=1.0).contains(&fx) && (0.0..=1.0).contains(&fy)) {
                return Err(Error::Param(format!("crop offset ({fx}, {fy}) outside [0, 1]")));
            }
        }
        Ok(Self { corner, delta })
    }

    pub fn full() -> Self {
        Self {
            corner: Corner::Full,
            delta: 1.0,
        }
    }

    /// Full view followed by the four fixed corners.
    pub fn inference_set(delta: f64) -> Result<Vec<CropSpec>> {
        let mut specs = vec![CropSpec::full()];
        for c in Corner::FIXED {
            specs.push(CropSpec::new(c, delta)?);
        }
        Ok(specs)
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// `floor(x + 1/2)`, with a small guard so products like `0.7 * 1000` that
/// land a hair under an integer still round to it.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

pub fn crop_region(spec: CropSpec, width: usize, height: usize) -> Result<Rect> {
    if width == 0 || height == 0 {
        return Err(Error::Param(format!("image extents {width}x{height} must be positive")));
    }
    let spec = CropSpec::new(spec.corner, spec.delta)?;
    let w = round_half_up(spec.delta * width as f64).clamp(1, width);
    let h = round_half_up(spec.delta * height as f64).clamp(1, height);
    let (sx, sy) = (width - w, height - h);
    let (x0, y0) = match spec.corner {
        Corner::Full | Corner::UpperLeft => (0, 0),
        Corner::UpperRight => (sx, 0),
        Corner::BottomLeft => (0, sy),
        Corner::BottomRight => (sx, sy),
        Corner::Offset { fx, fy } => (
            round_half_up(fx * sx as f64).min(sx),
            round_half_up(fy * sy as f64).min(sy),
        ),
    };
    Ok(Rect {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    })
}

/// Source coordinate sampled by output index `i` (corner-aligned).
#[inline]
pub fn aligned(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

struct Tap {
    i0: usize,
    i1: usize,
    t: f32,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            let u = aligned(i, src, dst);
            let i0 = (u.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            Tap {
                i0,
                i1,
                t: (u - i0 as f64) as f32,
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resize to `width x height`; an identity-size call returns an exact copy.
pub fn resize_bilinear(src: &Raster, width: usize, height: usize) -> Raster {
    assert!(src.width > 0 && src.height > 0 && width > 0 && height > 0);
    if src.width == width && src.height == height {
        return src.clone();
    }
    let c = src.channels;
    let tx = taps(src.width, width);
    let ty = taps(src.height, height);
    let mut out = Raster::new(width, height, c);
    let mut row0 = vec![0.0f32; width * c];
    let mut row1 = vec![0.0f32; width * c];
    let horizontal = |y: usize, row: &mut [f32]| {
        let base = y * src.width * c;
        for (x, tap) in tx.iter().enumerate() {
            for ch in 0..c {
                let a = src.data[base + tap.i0 * c + ch];
                let b = src.data[base + tap.i1 * c + ch];
                row[x * c + ch] = lerp(a, b, tap.t);
            }
        }
    };
    for (y, tap) in ty.iter().enumerate() {
        horizontal(tap.i0, &mut row0);
        horizontal(tap.i1, &mut row1);
        let dst = &mut out.data[y * width * c..(y + 1) * width * c];
        for ((d, &a), &b) in dst.iter_mut().zip(&row0).zip(&row1) {
            *d = lerp(a, b, tap.t);
        }
    }
    out
}

/// Nearest-neighbour index sampled by output index `i` (corner-aligned).
#[inline]
pub fn nearest(i: usize, src: usize, dst: usize) -> usize {
    round_half_up(aligned(i, src, dst)).min(src - 1)
}

/// Continuous full-frame position of view coordinate `(u, v)`.
pub fn view_to_full(rect: Rect, view_w: usize, view_h: usize, u: f64, v: f64) -> (f64, f64) {
    let map = |p: f64, x0: usize, side: usize, view: usize| {
        if view <= 1 {
            x0 as f64 + (side as f64 - 1.0) / 2.0
        } else {
            x0 as f64 + p * (side as f64 - 1.0) / (view as f64 - 1.0)
        }
    };
    (map(u, rect.x0, rect.width(), view_w), map(v, rect.y0, rect.height(), view_h))
}

/// Continuous view position of full-frame pixel `(x, y)`.
pub fn full_to_view(rect: Rect, view_w: usize, view_h: usize, x: f64, y: f64) -> (f64, f64) {
    let map = |p: f64, x0: usize, side: usize, view: usize| {
        if side <= 1 {
            (view as f64 - 1.0) / 2.0
        } else {
            (p - x0 as f64) * (view as f64 - 1.0) / (side as f64 - 1.0)
        }
    };
    (map(x, rect.x0, rect.width(), view_w), map(y, rect.y0, rect.height(), view_h))
}

/// Bilinearly resamples a view onto its rectangle of a full-resolution
/// canvas. Returns the canvas (zero off the rectangle) and the coverage mask.
pub fn map_view_to_full(spec: CropSpec, view: &Raster, full_w: usize, full_h: usize) -> Result<(Raster, Mask)> {
    let rect = crop_region(spec, full_w, full_h)?;
    let patch = resize_bilinear(view, rect.width(), rect.height());
    let c = view.channels;
    let mut canvas = Raster::new(full_w, full_h, c);
    for y in 0..rect.height() {
        let src = &patch.data[y * rect.width() * c..(y + 1) * rect.width() * c];
        let start = ((rect.y0 + y) * full_w + rect.x0) * c;
        canvas.data[start..start + src.len()].copy_from_slice(src);
    }
    let coverage = Mask::from_fn(full_w, full_h, |x, y| rect.contains(x, y));
    Ok((canvas, coverage))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: u32,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub width: usize,
    pub height: usize,
    pub entities: Vec<Entity>,
}

impl GroundTruthScene {
    /// Checks extents, non-emptiness and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut union = Mask::new(self.width, self.height);
        for e in &self.entities {
            if e.mask.width() != self.width || e.mask.height() != self.height {
                return Err(Error::Dimension {
                    op: "scene",
                    lhs: vec![self.height, self.width],
                    rhs: vec![e.mask.height(), e.mask.width()],
                });
            }
            if e.mask.is_empty() {
                return Err(Error::Data(format!("entity {} has an empty mask", e.id)));
            }
            if union.intersection_area(&e.mask)? != 0 {
                return Err(Error::Data(format!("entity {} overlaps an earlier entity", e.id)));
            }
            union = union.or(&e.mask)?;
        }
        Ok(())
    }

    /// Per-pixel entity index (+1), 0 for background.
    pub fn label_map(&self) -> Vec<u16> {
        let mut labels = vec![0u16; self.width * self.height];
        for (k, e) in self.entities.iter().enumerate() {
            for i in e.mask.ones() {
                labels[i] = k as u16 + 1;
            }
        }
        labels
    }
}

/// Ground truth of one view: one mask per scene entity, in scene order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGt {
    pub masks: Vec<Mask>,
    pub present: Vec<bool>,
}

/// Nearest-neighbour rasterisation of every entity into the view frame.
/// Entities with no sampled pixel in the view are flagged absent.
pub fn rasterize_view_gt(scene: &GroundTruthScene, spec: CropSpec, width: usize, height: usize) -> Result<ViewGt> {
    let rect = crop_region(spec, scene.width, scene.height)?;
    let labels = scene.label_map();
    rasterize_labels(&labels, scene.width, scene.entities.len(), rect, width, height)
}

pub(crate) fn rasterize_labels(
    labels: &[u16],
    full_w: usize,
    count: usize,
    rect: Rect,
    width: usize,
    height: usize,
) -> Result<ViewGt> {
    let xs: Vec<usize> = (0..width).map(|i| rect.x0 + nearest(i, rect.width(), width)).collect();
    let ys: Vec<usize> = (0..height).map(|i| rect.y0 + nearest(i, rect.height(), height)).collect();
    let mut masks = vec![Mask::new(width, height); count];
    for (v, &y) in ys.iter().enumerate() {
        for (u, &x) in xs.iter().enumerate() {
            let l = labels[y * full_w + x];
            if l > 0 {
                masks[l as usize - 1].set_index(v * width + u);
            }
        }
    }
    let present = masks.iter().map(|m| !m.is_empty()).collect();
    Ok(ViewGt { masks, present })
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub spec: CropSpec,
    pub rect: Rect,
    pub raster: Raster,
}

/// Views of one image at a common model input size; view 0 is the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch {
    pub full_width: usize,
    pub full_height: usize,
    pub views: Vec<View>,
}

impl MultiViewBatch {
    pub fn build(image: &Raster, specs: &[CropSpec], width: usize, height: usize) -> Result<Self> {
        if specs.first().map(|s| s.corner) != Some(Corner::Full) {
            return Err(Error::Param("view 0 must be the full image".into()));
        }
        let views = specs
            .iter()
            .map(|&spec| {
                let rect = crop_region(spec, image.width, image.height)?;
                let crop = image.crop(rect.x0, rect.y0, rect.x1, rect.y1);
                Ok(View {
                    spec,
                    rect,
                    raster: resize_bilinear(&crop, width, height),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            full_width: image.width,
            full_height: image.height,
            views,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// One of the four fixed corners, uniformly.
pub fn choose_corner(rng: &mut impl Rng) -> Corner {
    Corner::FIXED[rng.random_range(0..4)]
}

/// How training crops are placed. Inference always uses the four corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropSet {
    /// The four image corners.
    Fixed4,
    /// Eight crops; the layout has no settled definition and is rejected.
    Fixed8,
    /// Uniformly random placements.
    Random,
}

impl CropSet {
    pub fn label(self) -> &'static str {
        match self {
            CropSet::Fixed4 => "fixed4",
            CropSet::Fixed8 => "fixed8",
            CropSet::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed4" => Ok(CropSet::Fixed4),
            "fixed8" => Ok(CropSet::Fixed8),
            "random" => Ok(CropSet::Random),
            _ => Err(Error::Param(format!("unknown crop set {s:?} (fixed4, fixed8, random)"))),
        }
    }

    fn check(self) -> Result<()> {
        match self {
            CropSet::Fixed8 => Err(Error::Param("crop set fixed8 has no layout defined".into())),
            _ => Ok(()),
        }
    }

    /// One training crop.
    pub fn sample(self, delta: f64, rng: &mut impl Rng) -> Result<CropSpec> {
        self.check()?;
        let corner = match self {
            CropSet::Random => Corner::Offset {
                fx: rng.random_range(0.0..=1.0),
                fy: rng.random_range(0.0..=1.0),
            },
            _ => choose_corner(rng),
        };
        CropSpec::new(corner, delta)
    }
}

/// Full view plus one random corner crop, each with ground truth at
/// `mask_size x mask_size`.
pub fn build_training_batch(
    image: &Raster,
    scene: &GroundTruthScene,
    delta: f64,
    input_size: usize,
    mask_size: usize,
    rng: &mut impl Rng,
) -> Result<(MultiViewBatch, Vec<ViewGt>)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Param(format!("training crop ratio {delta} outside (0, 1)")));
    }
    if image.width < 4 || image.height < 4 {
        return Err(Error::Data(format!("image {}x{} is smaller than 4 pixels", image.width, image.height)));
    }
    let specs = [CropSpec::full(), CropSpec::new(choose_corner(rng), delta)?];
    training_views(image, scene, &specs, input_size, mask_size)
}

/// Views `specs` of one scene with their ground truth at `mask_size x mask_size`.
pub fn training_views(
    image: &Raster,
    scene: &GroundTruthScene,
    specs: &[CropSpec],
    input_size: usize,
    mask_size: usize,
) -> Result<(MultiViewBatch, Vec<ViewGt>)> {
    if image.width != scene.width || image.height != scene.height {
        return Err(Error::Dimension {
            op: "training_views",
            lhs: vec![image.height, image.width],
            rhs: vec![scene.height, scene.width],
        });
    }
    let batch = MultiViewBatch::build(image, specs, input_size, input_size)?;
    let gt = specs
        .iter()
        .map(|&s| rasterize_view_gt(scene, s, mask_size, mask_size))
        .collect::<Result<_>>()?;
    Ok((batch, gt))
}
