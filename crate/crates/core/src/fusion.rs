//! Inference over the full image and its four corner crops, back-mapping of
//! per-view mask probabilities to full resolution, averaging, and emission
//! of a non-overlapping entity map.

use cropformer_autodiff::{sigmoid, Graph, Real};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resize_bilinear, CropSpec, MultiViewBatch, Rect, View};
use crate::mask::{Mask, Rle};
use crate::model::{input_tensor, Model};
use crate::raster::Raster;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 16;

/// Which predictions feed fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderMode {
    /// Image-level decoder, full view only.
    IO,
    /// Batch-level decoder, full view only.
    BO,
    /// Batch-level decoder over full view and crops; crops fused.
    BC,
    /// Batch-level decoder over full view and crops; all fused.
    BOC,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 4] = [DecoderMode::IO, DecoderMode::BO, DecoderMode::BC, DecoderMode::BOC];

    pub fn label(self) -> &'static str {
        match self {
            DecoderMode::IO => "I-O",
            DecoderMode::BO => "B-O",
            DecoderMode::BC => "B-C",
            DecoderMode::BOC => "B-OC",
        }
    }

    /// Accepts `i-o`, `I-O`, `boc`, `b-oc` and similar spellings.
    pub fn parse(s: &str) -> Result<Self> {
        let k: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        match k.as_str() {
            "io" => Ok(DecoderMode::IO),
            "bo" => Ok(DecoderMode::BO),
            "bc" => Ok(DecoderMode::BC),
            "boc" => Ok(DecoderMode::BOC),
            _ => Err(Error::Param(format!("unknown decoder mode {s:?} (expected i-o, b-o, b-c or b-oc)"))),
        }
    }

    fn uses_crops(self) -> bool {
        matches!(self, DecoderMode::BC | DecoderMode::BOC)
    }
}

impl std::fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Predictions selected for fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub mode: DecoderMode,
    pub full_width: usize,
    pub full_height: usize,
    /// Views feeding fusion; one mask-logit stack per view.
    pub views: Vec<View>,
    /// Entityness logit per query.
    pub entity_logits: Vec<Real>,
    /// Per view, `N x side x side` mask logits.
    pub mask_logits: Vec<Vec<Real>>,
    pub mask_side: usize,
}

impl PredictionSet {
    pub fn queries(&self) -> usize {
        self.entity_logits.len()
    }

    /// Mask probabilities of query `n` in view `t`, as a one-channel raster.
    pub fn probability(&self, t: usize, n: usize) -> Raster {
        let p = self.mask_side * self.mask_side;
        Raster {
            width: self.mask_side,
            height: self.mask_side,
            channels: 1,
            data: self.mask_logits[t][n * p..(n + 1) * p].iter().map(|&x| sigmoid(x) as f32).collect(),
        }
    }
}

/// Runs the network on the views `mode` needs. Crop modes use the full
/// image plus four corner crops at ratio `delta`; views whose rectangles
/// coincide are computed once and shared (they are identical inputs, and
/// attention over exact duplicates is the same as over one copy).
pub fn infer_views(model: &Model, image: &Raster, delta: f64, mode: DecoderMode) -> Result<PredictionSet> {
    if image.width < MIN_IMAGE_SIDE || image.height < MIN_IMAGE_SIDE {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
            image.width, image.height
        )));
    }
    let specs = if mode.uses_crops() {
        CropSpec::inference_set(delta)?
    } else {
        vec![CropSpec::full()]
    };
    let size = model.config.input_size;
    let batch = MultiViewBatch::build(image, &specs, size, size)?;
    let mut unique: Vec<usize> = Vec::new();
    let slot: Vec<usize> = batch
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| match unique.iter().position(|&u| batch.views[u].rect == v.rect) {
            Some(k) => k,
            None => {
                unique.push(i);
                unique.len() - 1
            }
        })
        .collect();
    let rasters: Vec<&Raster> = unique.iter().map(|&u| &batch.views[u].raster).collect();
    let input = input_tensor(&rasters)?;
    let t = unique.len();

    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let out = model.forward(&mut g, &p, input, 1, t, mode != DecoderMode::IO)?;
    let (entity, masks) = match mode {
        DecoderMode::IO => (out.image_entity, out.image_masks),
        _ => (out.batch_entity.expect("batch stage ran"), out.batch_masks.expect("batch stage ran")),
    };
    let n = model.config.queries;
    let side = model.config.mask_size();
    let per_view = n * side * side;
    let entity_logits = g.value(entity).data()[..n].to_vec();
    let all = g.value(masks).data();
    let keep: Vec<usize> = match mode {
        DecoderMode::BC => (1..batch.views.len()).collect(),
        _ => (0..batch.views.len()).collect(),
    };
    Ok(PredictionSet {
        mode,
        full_width: image.width,
        full_height: image.height,
        views: keep.iter().map(|&i| batch.views[i].clone()).collect(),
        entity_logits,
        mask_logits: keep
            .iter()
            .map(|&i| all[slot[i] * per_view..(slot[i] + 1) * per_view].to_vec())
            .collect(),
        mask_side: side,
    })
}

/// Mean of the view maps at every pixel, over the views whose rectangle
/// covers it. Views are accumulated in rectangle order, so the result does
/// not depend on the order they are passed in.
pub fn fuse_probability(maps: &[(Rect, Raster)], width: usize, height: usize) -> Result<Raster> {
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by_key(|&i| {
        let r = maps[i].0;
        (r.x0, r.y0, r.x1, r.y1)
    });
    let mut sum = vec![0.0f64; width * height];
    let mut count = vec![0u32; width * height];
    for i in order {
        let (rect, map) = &maps[i];
        if rect.x1 > width || rect.y1 > height || map.channels != 1 {
            return Err(Error::Param(format!("view rectangle {rect:?} outside {width}x{height}")));
        }
        let patch = resize_bilinear(map, rect.width(), rect.height());
        for y in 0..rect.height() {
            let row = (rect.y0 + y) * width + rect.x0;
            let src = &patch.data[y * rect.width()..(y + 1) * rect.width()];
            for (k, &v) in src.iter().enumerate() {
                sum[row + k] += v as f64;
                count[row + k] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::Param(format!(
            "pixel ({}, {}) is covered by no view",
            i % width,
            i / width
        )));
    }
    Ok(Raster {
        width,
        height,
        channels: 1,
        data: sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mask: f64,
    pub score: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { mask: 0.5, score: 0.3 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mask", self.mask), ("score", self.score)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Param(format!("{name} threshold {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEntity {
    pub score: f64,
    pub query: usize,
    pub mask: Mask,
}

/// Disjoint entities sorted by nonincreasing score, plus the label raster
/// (entity index + 1, 0 for background).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEntityMap {
    pub width: usize,
    pub height: usize,
    pub entities: Vec<FusedEntity>,
    pub labels: Vec<u16>,
}

/// Candidate query for emission: index, score and full-resolution probabilities.
pub struct Candidate<'a> {
    pub query: usize,
    pub score: f64,
    pub probs: &'a [f32],
}

/// Per pixel, the candidate with the largest `score * probability` among
/// those whose probability reaches the mask threshold (earlier candidates
/// win ties). Candidates below the score threshold are skipped and empty
/// entities dropped.
pub fn emit_entities(candidates: &[Candidate<'_>], width: usize, height: usize, th: &Thresholds) -> Result<FusedEntityMap> {
    th.validate()?;
    let live: Vec<&Candidate> = candidates.iter().filter(|c| c.score >= th.score).collect();
    let npx = width * height;
    if let Some(c) = live.iter().find(|c| c.probs.len() != npx) {
        return Err(Error::Dimension {
            op: "emit_entities",
            lhs: vec![height, width],
            rhs: vec![c.probs.len()],
        });
    }
    let mut owner = vec![u16::MAX; npx];
    for (i, o) in owner.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (k, c) in live.iter().enumerate() {
            let p = c.probs[i] as f64;
            if p >= th.mask && c.score * p > best {
                best = c.score * p;
                *o = k as u16;
            }
        }
    }
    let mut masks = vec![Mask::new(width, height); live.len()];
    for (i, &o) in owner.iter().enumerate() {
        if o != u16::MAX {
            masks[o as usize].set_index(i);
        }
    }
    let mut entities: Vec<FusedEntity> = live
        .iter()
        .zip(masks)
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, mask)| FusedEntity {
            score: c.score,
            query: c.query,
            mask,
        })
        .collect();
    entities.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut labels = vec![0u16; npx];
    for (k, e) in entities.iter().enumerate() {
        for i in e.mask.ones() {
            labels[i] = k as u16 + 1;
        }
    }
    Ok(FusedEntityMap {
        width,
        height,
        entities,
        labels,
    })
}

/// Fuses every sufficiently confident query of a prediction set.
pub fn fuse_predictions(preds: &PredictionSet, th: &Thresholds) -> Result<FusedEntityMap> {
    let (w, h) = (preds.full_width, preds.full_height);
    let mut fused = Vec::new();
    for n in 0..preds.queries() {
        let score = sigmoid(preds.entity_logits[n]) as f64;
        if score < th.score {
            continue;
        }
        let maps: Vec<(Rect, Raster)> = (0..preds.views.len())
            .map(|t| (preds.views[t].rect, preds.probability(t, n)))
            .collect();
        fused.push((n, score, fuse_probability(&maps, w, h)?));
    }
    let candidates: Vec<Candidate> = fused
        .iter()
        .map(|(n, s, r)| Candidate {
            query: *n,
            score: *s,
            probs: &r.data,
        })
        .collect();
    emit_entities(&candidates, w, h, th)
}

pub fn run_inference(model: &Model, image: &Raster, delta: f64, mode: DecoderMode, th: &Thresholds) -> Result<FusedEntityMap> {
    let preds = infer_views(model, image, delta, mode)?;
    fuse_predictions(&preds, th)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub score: f64,
    pub rle: Rle,
}

/// Per-image inference output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub image_id: String,
    pub entities: Vec<EntityRecord>,
}

impl InferenceRecord {
    pub fn from_map(image_id: impl Into<String>, map: &FusedEntityMap) -> Self {
        Self {
            image_id: image_id.into(),
            entities: map
                .entities
                .iter()
                .map(|e| EntityRecord {
                    score: e.score,
                    rle: Rle::encode(&e.mask),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(DecoderMode::parse("b-oc").unwrap(), DecoderMode::BOC);
        assert_eq!(DecoderMode::parse("I-O").unwrap(), DecoderMode::IO);
        assert!(DecoderMode::parse("x").is_err());
    }

    #[test]
    fn average_over_covering_views() {
        let full = Rect { x0: 0, y0: 0, x1: 4, y1: 4 };
        let crop = Rect { x0: 2, y0: 2, x1: 4, y1: 4 };
        let maps = vec![
            (full, Raster::filled(3, 3, 1, 0.8)),
            (crop, Raster::filled(3, 3, 1, 0.6)),
        ];
        let f = fuse_probability(&maps, 4, 4).unwrap();
        assert!((f.get(3, 3, 0) - 0.7).abs() < 1e-6);
        assert_eq!(f.get(0, 0, 0), 0.8);
        assert!(fuse_probability(&maps[1..], 4, 4).is_err());
    }

    #[test]
    fn argmax_and_thresholds() {
        let a = vec![0.8f32; 4];
        let b = vec![0.7f32; 4];
        let th = Thresholds::default();
        // 0.9 * 0.8 = 0.72 beats 0.8 * 0.7 = 0.56
        let m = emit_entities(
            &[
                Candidate { query: 0, score: 0.9, probs: &a },
                Candidate { query: 1, score: 0.8, probs: &b },
            ],
            2,
            2,
            &th,
        )
        .unwrap();
        assert_eq!(m.entities.len(), 1);
        assert_eq!(m.entities[0].query, 0);
        assert_eq!(m.labels, vec![1; 4]);
        let none = emit_entities(&[Candidate { query: 0, score: 0.1, probs: &a }], 2, 2, &th).unwrap();
        assert!(none.entities.is_empty() && none.labels.iter().all(|&l| l == 0));
    }
}
