//! Evaluation of trained models on the test split and the ablation grid
//! over crop ratio, crop set, seed and decoder mode.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, boundary_ap, coco_thresholds, dataset_stats, Annotation, ApReport, DatasetStats, ImageEval,
    Prediction, DEFAULT_BOUNDARY_RATIO,
};
use crate::fusion::{run_inference, DecoderMode, FusedEntityMap, InferenceRecord};
use crate::geometry::CropSet;
use crate::model::Model;
use crate::synth::{annotation_path, load_scene, read_index, read_json, synth_corpus, write_json, SceneAnnotation, INDEX_FILE};
use crate::train::{load_model, saved_iteration, train, LogRecord, TrainingSet, METRICS_FILE, MODEL_FILE};

/// AP summary of one decoder mode, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub mode: DecoderMode,
    pub delta: f64,
    pub ap_e: f64,
    pub ap_e50: f64,
    pub ap_e75: f64,
    pub ap_b: f64,
}

fn predictions(map: &FusedEntityMap) -> Vec<Prediction> {
    map.entities
        .iter()
        .map(|e| Prediction {
            score: e.score,
            mask: e.mask.clone(),
        })
        .collect()
}

/// Scores per-mode prediction sets against shared ground truth.
pub fn score_modes(modes: &[DecoderMode], delta: f64, corpora: &[Vec<ImageEval>]) -> Result<Vec<ModeScore>> {
    let t = coco_thresholds();
    modes
        .iter()
        .zip(corpora)
        .map(|(&mode, corpus)| {
            let e = average_precision(corpus, &t)?;
            let b = boundary_ap(corpus, &t, DEFAULT_BOUNDARY_RATIO)?;
            Ok(ModeScore {
                mode,
                delta,
                ap_e: e.ap,
                ap_e50: e.at(0.5).unwrap_or(0.0),
                ap_e75: e.at(0.75).unwrap_or(0.0),
                ap_b: b.ap,
            })
        })
        .collect()
}

/// Runs `model` on the corpus images `ids` in every mode and scores the result.
pub fn evaluate_model(
    model: &Model,
    corpus: &Path,
    ids: &[String],
    delta: f64,
    modes: &[DecoderMode],
    config: &Config,
) -> Result<Vec<ModeScore>> {
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no images to evaluate", corpus.display())));
    }
    let mut per_mode: Vec<Vec<ImageEval>> = vec![Vec::with_capacity(ids.len()); modes.len()];
    for id in ids {
        let (image, scene) = load_scene(corpus, id)?;
        let gt: Vec<_> = scene.entities.into_iter().map(|e| e.mask).collect();
        for (k, &mode) in modes.iter().enumerate() {
            let map = run_inference(model, &image, delta, mode, &config.thresholds)?;
            per_mode[k].push(ImageEval {
                gt: gt.clone(),
                preds: predictions(&map),
            });
        }
    }
    score_modes(modes, delta, &per_mode)
}

/// AP of stored inference records against corpus annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub ap_e: ApReport,
    pub ap_b: ApReport,
}

/// Scores `records` against the annotations of the same image ids in `corpus`.
pub fn evaluate_records(corpus: &Path, records: &[InferenceRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("no inference records".into()));
    }
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        let ann: SceneAnnotation = read_json(&annotation_path(corpus, &r.image_id))?;
        let scene = ann.to_scene()?;
        let preds = r
            .entities
            .iter()
            .map(|e| {
                if e.rle.size != [scene.height, scene.width] {
                    return Err(Error::Data(format!(
                        "{}: prediction size {:?} differs from annotation [{}, {}]",
                        r.image_id, e.rle.size, scene.height, scene.width
                    )));
                }
                Ok(Prediction {
                    score: e.score,
                    mask: e.rle.decode()?,
                })
            })
            .collect::<Result<_>>()?;
        images.push(ImageEval {
            gt: scene.entities.into_iter().map(|e| e.mask).collect(),
            preds,
        });
    }
    let t = coco_thresholds();
    Ok(EvalReport {
        images: images.len(),
        ap_e: average_precision(&images, &t)?,
        ap_b: boundary_ap(&images, &t, DEFAULT_BOUNDARY_RATIO)?,
    })
}

/// Dataset statistics over every annotated image of a corpus.
pub fn corpus_stats(corpus: &Path) -> Result<DatasetStats> {
    let index = read_index(corpus)?;
    let mut annotations = Vec::new();
    for id in index.train.iter().chain(&index.test) {
        let ann: SceneAnnotation = read_json(&annotation_path(corpus, id))?;
        let scene = ann.to_scene()?;
        annotations.push(Annotation {
            width: scene.width,
            height: scene.height,
            masks: scene.entities.into_iter().map(|e| e.mask).collect(),
        });
    }
    dataset_stats(&annotations)
}

/// Creates the corpus described by `config` unless an index is present.
pub fn ensure_corpus(config: &Config) -> Result<()> {
    if config.corpus_dir.join(INDEX_FILE).exists() {
        return Ok(());
    }
    synth_corpus(
        &config.corpus_dir,
        config.corpus_images,
        config.corpus_resolution,
        config.corpus_seed,
    )?;
    Ok(())
}

/// One trained grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub delta: f64,
    pub crops: CropSet,
    pub seed: u64,
    pub training_hash: String,
    pub run_dir: PathBuf,
    pub scores: Vec<ModeScore>,
}

impl Cell {
    pub fn score(&self, mode: DecoderMode) -> Option<&ModeScore> {
        self.scores.iter().find(|s| s.mode == mode)
    }

    pub fn log(&self) -> Result<Vec<LogRecord>> {
        crate::train::read_log(&self.run_dir.join(METRICS_FILE))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<Cell>,
}

const SCORES_FILE: &str = "scores.json";

#[derive(Serialize, Deserialize)]
struct CachedScores {
    training_hash: String,
    thresholds: (f64, f64),
    scores: Vec<ModeScore>,
}

/// Configuration of one grid cell.
pub fn cell_config(base: &Config, delta: f64, crops: CropSet, seed: u64) -> Config {
    let mut c = base.clone();
    c.delta = delta;
    c.crops = crops;
    c.seed = seed;
    let hash = c.training_hash();
    c.out_dir = base.out_dir.join(format!("run-{}", &hash[..12]));
    c
}

/// Trains (or reuses) and evaluates one cell. A finished run and cached
/// scores for the same configuration are reused as they are.
pub fn run_cell(config: &Config, progress: &mut dyn FnMut(&str)) -> Result<Cell> {
    let out = config.out_dir.clone();
    let hash = config.training_hash();
    let label = format!("delta {} crops {} seed {}", config.delta, config.crops.label(), config.seed);
    let model = if saved_iteration(config, &out)? == Some(config.iterations) {
        load_model(config, &out.join(MODEL_FILE))?
    } else {
        progress(&format!("training {label} in {}", out.display()));
        let data = TrainingSet::load(config)?;
        let every = (config.iterations / 10).max(1);
        train(config, &data, &out, |r| {
            if r.iter % every == 0 {
                progress(&format!("  iter {} loss {:.4}", r.iter, r.total));
            }
        })?
        .model
    };
    let cache = out.join(SCORES_FILE);
    let th = (config.thresholds.mask, config.thresholds.score);
    if cache.exists() {
        let c: CachedScores = read_json(&cache)?;
        if c.training_hash == hash && c.thresholds == th {
            return Ok(Cell {
                delta: config.delta,
                crops: config.crops,
                seed: config.seed,
                training_hash: hash,
                run_dir: out,
                scores: c.scores,
            });
        }
    }
    progress(&format!("evaluating {label}"));
    let index = read_index(&config.corpus_dir)?;
    let scores = evaluate_model(&model, &config.corpus_dir, &index.test, config.delta, &DecoderMode::ALL, config)?;
    write_json(
        &cache,
        &CachedScores {
            training_hash: hash.clone(),
            thresholds: th,
            scores: scores.clone(),
        },
    )?;
    Ok(Cell {
        delta: config.delta,
        crops: config.crops,
        seed: config.seed,
        training_hash: hash,
        run_dir: out,
        scores,
    })
}

/// Every cell of the grid in `config`: ratios x crop sets x seeds, each
/// scored in all four decoder modes on the test split.
pub fn ablate(config: &Config, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    config.validate()?;
    ensure_corpus(config)?;
    let mut cells = Vec::new();
    for &delta in &config.ablate_deltas {
        for &crops in &config.ablate_crops {
            for &seed in &config.ablate_seeds {
                let c = cell_config(config, delta, crops, seed);
                c.validate()?;
                cells.push(run_cell(&c, &mut progress)?);
            }
        }
    }
    Ok(AblationReport { cells })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One aggregated table row: the seed median of a mode at a grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub delta: f64,
    pub crops: CropSet,
    pub mode: DecoderMode,
    pub seeds: usize,
    pub ap_e: f64,
    pub ap_e50: f64,
    pub ap_e75: f64,
    pub ap_b: f64,
}

impl AblationReport {
    /// Seed medians per ratio, crop set and mode, ratios ascending and modes
    /// in I-O, B-O, B-C, B-OC order.
    pub fn rows(&self) -> Vec<Row> {
        let mut keys: Vec<(f64, CropSet)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|k| k.0 == c.delta && k.1 == c.crops) {
                keys.push((c.delta, c.crops));
            }
        }
        keys.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut rows = Vec::new();
        for (delta, crops) in keys {
            let group: Vec<&Cell> = self.cells.iter().filter(|c| c.delta == delta && c.crops == crops).collect();
            for mode in DecoderMode::ALL {
                let s: Vec<&ModeScore> = group.iter().filter_map(|c| c.score(mode)).collect();
                if s.is_empty() {
                    continue;
                }
                let pick = |f: fn(&ModeScore) -> f64| median(s.iter().map(|x| f(x)).collect());
                rows.push(Row {
                    delta,
                    crops,
                    mode,
                    seeds: s.len(),
                    ap_e: pick(|x| x.ap_e),
                    ap_e50: pick(|x| x.ap_e50),
                    ap_e75: pick(|x| x.ap_e75),
                    ap_b: pick(|x| x.ap_b),
                });
            }
        }
        rows
    }

    /// Median over seeds of `f(cell)` for the cells at a grid point.
    pub fn median_of(&self, delta: f64, crops: CropSet, f: impl Fn(&Cell) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.delta == delta && c.crops == crops)
            .filter_map(f)
            .collect();
        (!v.is_empty()).then(|| median(v))
    }

    /// Aligned plain-text table, AP values in points.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:<7} {:<8} {:>5} {:>7} {:>7} {:>7} {:>7}\n",
            "delta", "crops", "decoder", "seeds", "AP^e", "AP^e50", "AP^e75", "AP^b"
        ));
        for r in self.rows() {
            out.push_str(&format!(
                "{:<6} {:<7} {:<8} {:>5} {:>7.1} {:>7.1} {:>7.1} {:>7.1}\n",
                r.delta,
                r.crops.label(),
                r.mode.label(),
                r.seeds,
                100.0 * r.ap_e,
                100.0 * r.ap_e50,
                100.0 * r.ap_e75,
                100.0 * r.ap_b
            ));
        }
        out
    }
}
