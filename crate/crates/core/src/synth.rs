//! Procedural high-resolution scenes: opaque coloured shapes (polygons,
//! smooth blobs, thin bars) painted over a noisy grey background, later
//! shapes occluding earlier ones.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Entity, GroundTruthScene};
use crate::imageio::{read_image, write_png};
use crate::mask::{Mask, Rle};
use crate::raster::Raster;

pub const MIN_ENTITIES: usize = 3;
pub const MAX_ENTITIES: usize = 12;
/// Entities left with fewer visible pixels (relative to a 1024 x 1024 canvas) are dropped.
const MIN_VISIBLE_AREA: f64 = 600.0;

#[derive(Debug, Clone)]
enum Shape {
    /// Star-shaped polygon around a centre.
    Polygon(Vec<(f64, f64)>),
    /// `r(theta) = radius * (1 + sum a_k cos(k theta + phi_k))`
    Blob {
        cx: f64,
        cy: f64,
        radius: f64,
        harmonics: Vec<(f64, f64, f64)>,
    },
    /// Rotated rectangle: centre, unit direction, half length, half width.
    Bar {
        cx: f64,
        cy: f64,
        dir: (f64, f64),
        half_len: f64,
        half_width: f64,
    },
}

impl Shape {
    fn bbox(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = match self {
            Shape::Polygon(pts) => pts.iter().fold(
                (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
            Shape::Blob { cx, cy, radius, harmonics } => {
                let r = radius * (1.0 + harmonics.iter().map(|h| h.1.abs()).sum::<f64>());
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Bar { cx, cy, dir, half_len, half_width } => {
                let ex = dir.0.abs() * half_len + dir.1.abs() * half_width;
                let ey = dir.1.abs() * half_len + dir.0.abs() * half_width;
                (cx - ex, cy - ey, cx + ex, cy + ey)
            }
        };
        let clamp = |v: f64, hi: usize| v.floor().clamp(0.0, hi as f64) as usize;
        (clamp(x0, w), clamp(y0, h), clamp(x1 + 1.0, w), clamp(y1 + 1.0, h))
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Polygon(pts) => {
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (a, b) = (pts[i], pts[(i + n - 1) % n]);
                    if (a.1 > y) != (b.1 > y) && x < (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0 {
                        inside = !inside;
                    }
                }
                inside
            }
            Shape::Blob { cx, cy, radius, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let theta = dy.atan2(dx);
                let r = radius * (1.0 + harmonics.iter().map(|&(k, a, phi)| a * (k * theta + phi).cos()).sum::<f64>());
                dx * dx + dy * dy <= r * r
            }
            Shape::Bar { cx, cy, dir, half_len, half_width } => {
                let (dx, dy) = (x - cx, y - cy);
                let along = dx * dir.0 + dy * dir.1;
                let across = -dx * dir.1 + dy * dir.0;
                along.abs() <= *half_len && across.abs() <= *half_width
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Flat,
    Stripes { dir: (f64, f64), period: f64, amp: f64 },
    Speckle { amp: f64 },
}

#[derive(Debug, Clone)]
struct Paint {
    color: [f64; 3],
    texture: Texture,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_shape(rng: &mut ChaCha8Rng, size: f64, thin: bool) -> Shape {
    let s = size / 1024.0;
    let cx = rng.random_range(0.05..0.95) * size;
    let cy = rng.random_range(0.05..0.95) * size;
    if thin {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        return Shape::Bar {
            cx,
            cy,
            dir: (angle.cos(), angle.sin()),
            half_len: rng.random_range(120.0..360.0) * s,
            half_width: (rng.random_range(2.0..12.0) * s).max(1.0),
        };
    }
    if rng.random_bool(0.5) {
        let n = rng.random_range(3..=8);
        let radius = rng.random_range(60.0..230.0) * s;
        let convex = rng.random_bool(0.5);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts = angles
            .iter()
            .map(|&a| {
                let r = if convex { radius } else { radius * rng.random_range(0.45..1.0) };
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        Shape::Polygon(pts)
    } else {
        let harmonics = (2..=5)
            .map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Shape::Blob {
            cx,
            cy,
            radius: rng.random_range(50.0..200.0) * s,
            harmonics,
        }
    }
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    match rng.random_range(0..3) {
        0 => Texture::Flat,
        1 => {
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Texture::Stripes {
                dir: (a.cos(), a.sin()),
                period: rng.random_range(10.0..40.0),
                amp: rng.random_range(0.03..0.08),
            }
        }
        _ => Texture::Speckle {
            amp: rng.random_range(0.02..0.06),
        },
    }
}

/// One scene at `size x size`, fully determined by `seed`.
pub fn generate_scene(seed: u64, size: usize) -> Result<(Raster, GroundTruthScene)> {
    if size < 32 {
        return Err(Error::Param(format!("scene size {size} below 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;
    let min_area = MIN_VISIBLE_AREA * (sz / 1024.0).powi(2);
    loop {
        let count = rng.random_range(MIN_ENTITIES..=MAX_ENTITIES);
        let thin_count = if rng.random_bool(0.5) { rng.random_range(1..=2).min(count) } else { 0 };
        // distinct hues: a shuffled subset of evenly spaced hues with a small jitter
        let base: f64 = rng.random_range(0.0..1.0);
        let mut hues: Vec<f64> = (0..MAX_ENTITIES).map(|k| base + k as f64 / MAX_ENTITIES as f64).collect();
        for i in (1..hues.len()).rev() {
            let j = rng.random_range(0..=i);
            hues.swap(i, j);
        }
        let mut shapes = Vec::with_capacity(count);
        let mut paints = Vec::with_capacity(count);
        for k in 0..count {
            // thin structures go last so they are not buried under later shapes
            let thin = k >= count - thin_count;
            shapes.push(random_shape(&mut rng, sz, thin));
            paints.push(Paint {
                color: hsv(
                    hues[k] + rng.random_range(-0.015..0.015),
                    rng.random_range(0.65..1.0),
                    rng.random_range(0.6..1.0),
                ),
                texture: random_texture(&mut rng),
            });
        }
        let mut labels = vec![0u16; size * size];
        for (k, shape) in shapes.iter().enumerate() {
            let (x0, y0, x1, y1) = shape.bbox(size, size);
            for y in y0..y1 {
                for x in x0..x1 {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        labels[y * size + x] = k as u16 + 1;
                    }
                }
            }
        }
        let mut area = vec![0usize; count + 1];
        for &l in &labels {
            area[l as usize] += 1;
        }
        let keep: Vec<bool> = (0..count).map(|k| area[k + 1] as f64 >= min_area).collect();
        if keep.iter().filter(|&&k| k).count() < MIN_ENTITIES {
            continue;
        }
        let mut remap = vec![0u16; count + 1];
        let mut next = 0u16;
        for k in 0..count {
            if keep[k] {
                next += 1;
                remap[k + 1] = next;
            }
        }
        for l in &mut labels {
            *l = remap[*l as usize];
        }
        let kept_paints: Vec<&Paint> = (0..count).filter(|&k| keep[k]).map(|k| &paints[k]).collect();

        let bg_level = rng.random_range(0.35..0.65);
        let bg_grad = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let mut image = Raster::new(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 / sz, y as f64 / sz);
                let l = labels[y * size + x];
                let rgb = if l == 0 {
                    let g = bg_level + bg_grad.0 * (fx - 0.5) + bg_grad.1 * (fy - 0.5);
                    let n = rng.random_range(-0.05..0.05);
                    [g + n, g + n, g + n]
                } else {
                    let p = kept_paints[l as usize - 1];
                    let t = match p.texture {
                        Texture::Flat => 0.0,
                        Texture::Stripes { dir, period, amp } => {
                            amp * ((x as f64 * dir.0 + y as f64 * dir.1) * std::f64::consts::TAU / period).sin()
                        }
                        Texture::Speckle { amp } => rng.random_range(-amp..amp),
                    };
                    [p.color[0] + t, p.color[1] + t, p.color[2] + t]
                };
                for (c, v) in rgb.iter().enumerate() {
                    image.set(x, y, c, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        let n = next as usize;
        let mut masks = vec![Mask::new(size, size); n];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                masks[l as usize - 1].set_index(i);
            }
        }
        let scene = GroundTruthScene {
            width: size,
            height: size,
            entities: masks
                .into_iter()
                .enumerate()
                .map(|(k, mask)| Entity { id: k as u32 + 1, mask })
                .collect(),
        };
        return Ok((image, scene));
    }
}

/// Seed of scene `index` within a corpus.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = corpus_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub id: u32,
    pub rle: Rle,
}

/// Ground-truth record of one image on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub entities: Vec<EntityAnnotation>,
}

impl SceneAnnotation {
    pub fn from_scene(image_id: impl Into<String>, scene: &GroundTruthScene) -> Self {
        Self {
            image_id: image_id.into(),
            width: scene.width,
            height: scene.height,
            entities: scene
                .entities
                .iter()
                .map(|e| EntityAnnotation {
                    id: e.id,
                    rle: Rle::encode(&e.mask),
                })
                .collect(),
        }
    }

    pub fn to_scene(&self) -> Result<GroundTruthScene> {
        let entities = self
            .entities
            .iter()
            .map(|e| {
                if e.rle.size != [self.height, self.width] {
                    return Err(Error::Data(format!(
                        "{}: entity {} has size {:?}, image is [{}, {}]",
                        self.image_id, e.id, e.rle.size, self.height, self.width
                    )));
                }
                Ok(Entity {
                    id: e.id,
                    mask: e.rle.decode()?,
                })
            })
            .collect::<Result<_>>()?;
        let scene = GroundTruthScene {
            width: self.width,
            height: self.height,
            entities,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Corpus index: generation parameters and the train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub seed: u64,
    pub resolution: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const INDEX_FILE: &str = "corpus.json";

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

pub fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("annotations").join(format!("{id}.json"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `n` scenes with their annotations and an index; the first 80% (by
/// index) form the training split.
pub fn synth_corpus(dir: &Path, n: usize, resolution: usize, seed: u64) -> Result<CorpusIndex> {
    if n == 0 {
        return Err(Error::Param("corpus needs at least one image".into()));
    }
    let n_train = n * 4 / 5;
    let mut index = CorpusIndex {
        seed,
        resolution,
        train: vec![],
        test: vec![],
    };
    for i in 0..n {
        let id = format!("scene_{i:05}");
        let (image, scene) = generate_scene(scene_seed(seed, i), resolution)?;
        write_png(&image_path(dir, &id), &image)?;
        write_json(&annotation_path(dir, &id), &SceneAnnotation::from_scene(&id, &scene))?;
        if i < n_train {
            index.train.push(id);
        } else {
            index.test.push(id);
        }
    }
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<CorpusIndex> {
    read_json(&dir.join(INDEX_FILE))
}

/// Loads one image and its ground truth from a corpus directory.
pub fn load_scene(dir: &Path, id: &str) -> Result<(Raster, GroundTruthScene)> {
    let image = read_image(&image_path(dir, id))?;
    let ann: SceneAnnotation = read_json(&annotation_path(dir, id))?;
    let scene = ann.to_scene()?;
    if (image.width, image.height) != (scene.width, scene.height) {
        return Err(Error::Data(format!(
            "{id}: image is {}x{}, annotation {}x{}",
            image.width, image.height, scene.width, scene.height
        )));
    }
    Ok((image, scene))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_valid_and_deterministic() {
        for seed in 0..4 {
            let (img, scene) = generate_scene(seed, 128).unwrap();
            scene.validate().unwrap();
            assert!((MIN_ENTITIES..=MAX_ENTITIES).contains(&scene.entities.len()));
            let (img2, scene2) = generate_scene(seed, 128).unwrap();
            assert_eq!(img, img2);
            assert_eq!(scene, scene2);
        }
    }

    #[test]
    fn shapes_contain_their_centres() {
        let bar = Shape::Bar {
            cx: 10.0,
            cy: 10.0,
            dir: (1.0, 0.0),
            half_len: 5.0,
            half_width: 1.0,
        };
        assert!(bar.contains(14.0, 10.5) && !bar.contains(10.0, 12.0));
        let tri = Shape::Polygon(vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]);
        assert!(tri.contains(2.0, 2.0) && !tri.contains(8.0, 8.0));
    }
}
