//! Training loop: scene sampling, crop views, both loss levels, Adam,
//! metric records, checkpoints and resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use cropformer_autodiff::optim::{Adam, AdamConfig, OptimError};
use cropformer_autodiff::{load_checkpoint, save_checkpoint, Graph, Real};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{training_views, CropSet, CropSpec, ViewGt};
use crate::loss::{batch_level_loss, image_level_loss, total_loss, LossReport};
use crate::model::{input_tensor, Model};
use crate::raster::Raster;
use crate::synth::{load_scene, read_index, read_json, scene_seed, write_json};

pub const MODEL_FILE: &str = "model.crpf";
pub const OPTIMIZER_FILE: &str = "optimizer.crpf";
pub const STATE_FILE: &str = "train_state.json";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CONFIG_FILE: &str = "config.txt";

/// One metrics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub ce_i: f64,
    pub bce_i: f64,
    pub dice_i: f64,
    pub ce_b: f64,
    pub bce_b: f64,
    pub dice_b: f64,
    pub total: f64,
}

impl LogRecord {
    fn new(iter: usize, r: &LossReport) -> Self {
        Self {
            iter,
            ce_i: r.ce_i,
            bce_i: r.bce_i,
            dice_i: r.dice_i,
            ce_b: r.ce_b,
            bce_b: r.bce_b,
            dice_b: r.dice_b,
            total: r.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    iteration: usize,
    config_hash: String,
}

/// Views of one training scene: with fixed corners every candidate view is
/// prepared up front; random crops keep the source on disk and cut on demand.
enum Item {
    Fixed { views: Vec<Raster>, gts: Vec<ViewGt> },
    OnDisk { dir: PathBuf, id: String },
}

/// Training scenes prepared for a given crop set, ratio and model size.
pub struct TrainingSet {
    items: Vec<Item>,
    crops: CropSet,
    delta: f64,
    input_size: usize,
    mask_size: usize,
}

impl TrainingSet {
    /// The training split of the corpus at `config.corpus_dir`.
    pub fn load(config: &Config) -> Result<Self> {
        let dir = &config.corpus_dir;
        let index = read_index(dir)?;
        if index.train.is_empty() {
            return Err(Error::Data(format!("{}: empty training split", dir.display())));
        }
        let (input_size, mask_size) = (config.model.input_size, config.model.mask_size());
        let mut items = Vec::with_capacity(index.train.len());
        for id in &index.train {
            items.push(match config.crops {
                CropSet::Random => Item::OnDisk {
                    dir: dir.clone(),
                    id: id.clone(),
                },
                _ => {
                    let (image, scene) = load_scene(dir, id)?;
                    let mut specs = vec![CropSpec::full()];
                    for c in crate::geometry::Corner::FIXED {
                        specs.push(CropSpec::new(c, config.delta)?);
                    }
                    let (batch, gts) = training_views(&image, &scene, &specs, input_size, mask_size)?;
                    Item::Fixed {
                        views: batch.views.into_iter().map(|v| v.raster).collect(),
                        gts,
                    }
                }
            });
        }
        Ok(Self {
            items,
            crops: config.crops,
            delta: config.delta,
            input_size,
            mask_size,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Full view and one crop of scene `i`.
    fn pair(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Raster>, Vec<ViewGt>)> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Param(format!("training crop ratio {} outside (0, 1)", self.delta)));
        }
        let spec = self.crops.sample(self.delta, rng)?;
        match &self.items[i] {
            Item::Fixed { views, gts } => {
                let k = 1 + crate::geometry::Corner::FIXED
                    .iter()
                    .position(|&c| c == spec.corner)
                    .expect("fixed corner");
                Ok((vec![views[0].clone(), views[k].clone()], vec![gts[0].clone(), gts[k].clone()]))
            }
            Item::OnDisk { dir, id } => {
                let (image, scene) = load_scene(dir, id)?;
                let (batch, gts) = training_views(
                    &image,
                    &scene,
                    &[CropSpec::full(), spec],
                    self.input_size,
                    self.mask_size,
                )?;
                Ok((batch.views.into_iter().map(|v| v.raster).collect(), gts))
            }
        }
    }
}

fn adam_config(config: &Config, iter: usize) -> AdamConfig {
    let o = &config.optim;
    let dropped = (iter as f64) >= o.lr_drop * config.iterations as f64 && o.lr_drop < 1.0;
    AdamConfig {
        lr: (if dropped { o.lr * 0.1 } else { o.lr }) as Real,
        beta1: o.beta1 as Real,
        beta2: o.beta2 as Real,
        eps: o.eps as Real,
        weight_decay: o.weight_decay as Real,
        max_grad_norm: (o.max_grad_norm > 0.0).then_some(o.max_grad_norm as Real),
    }
}

fn optim_error(e: OptimError) -> Error {
    match e {
        OptimError::NonFiniteGradient { .. } => Error::NonFinite(e.to_string()),
        other => Error::Param(other.to_string()),
    }
}

/// One optimisation step on scenes `indices`; returns the loss terms.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    config: &Config,
    data: &TrainingSet,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let mut rasters = Vec::with_capacity(indices.len() * 2);
    let mut gts = Vec::with_capacity(indices.len());
    for &i in indices {
        let (views, gt) = data.pair(i, rng)?;
        rasters.extend(views);
        gts.push(gt);
    }
    let refs: Vec<&Raster> = rasters.iter().collect();
    let input = input_tensor(&refs)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, input, indices.len(), 2, true)?;
    let (image_terms, _) = image_level_loss(&mut g, out.image_entity, out.image_masks, &gts, &config.loss.image)?;
    let batch_entity = out.batch_entity.expect("batch stage ran");
    let batch_masks = out.batch_masks.expect("batch stage ran");
    let (batch_terms, _) = batch_level_loss(&mut g, batch_entity, batch_masks, &gts, &config.loss.batch)?;
    let (total, report) = total_loss(&mut g, &image_terms, &batch_terms, &config.loss)?;
    g.backward(total)?;
    adam.step(&mut model.params, &p.grads(&g)).map_err(optim_error)?;
    Ok(report)
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    /// Records of this invocation (earlier records stay in the log file).
    pub log: Vec<LogRecord>,
    /// Iteration the run resumed from, if any.
    pub resumed_from: Option<usize>,
}

fn write_log(path: &Path, records: &[LogRecord], append: bool) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a metrics log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn save(out: &Path, model: &Model, adam: &Adam, iteration: usize, hash: &str) -> Result<()> {
    // each file goes through a rename; the state record is written last
    let tmp_model = out.join(format!("{MODEL_FILE}.tmp"));
    let tmp_opt = out.join(format!("{OPTIMIZER_FILE}.tmp"));
    save_checkpoint(&model.params, &tmp_model)?;
    save_checkpoint(&adam.state(&model.params), &tmp_opt)?;
    std::fs::rename(&tmp_model, out.join(MODEL_FILE)).map_err(|e| Error::io(out, e))?;
    std::fs::rename(&tmp_opt, out.join(OPTIMIZER_FILE)).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join(STATE_FILE),
        &TrainState {
            iteration,
            config_hash: hash.to_string(),
        },
    )
}

/// Iteration of the checkpoint in `out`, if it belongs to `config`.
pub fn saved_iteration(config: &Config, out: &Path) -> Result<Option<usize>> {
    let path = out.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let state: TrainState = read_json(&path)?;
    Ok((state.config_hash == config.training_hash()).then_some(state.iteration))
}

/// Loads the model saved in a run directory.
pub fn load_model(config: &Config, path: &Path) -> Result<Model> {
    let store = load_checkpoint(path)?;
    Model::with_params(config.model.clone(), store)
}

/// Trains per `config`, writing checkpoints and metrics to `out`. A run
/// directory holding a checkpoint of the same configuration is resumed.
/// `progress` sees every record as it is produced.
pub fn train(config: &Config, data: &TrainingSet, out: &Path, mut progress: impl FnMut(&LogRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = config.training_hash();
    let state_path = out.join(STATE_FILE);
    let metrics = out.join(METRICS_FILE);
    let (mut model, mut adam, start) = if state_path.exists() {
        let state: TrainState = read_json(&state_path)?;
        if state.config_hash != hash {
            return Err(Error::Param(format!(
                "{} holds a run with a different configuration",
                out.display()
            )));
        }
        let model = load_model(config, &out.join(MODEL_FILE))?;
        let opt_state = load_checkpoint(out.join(OPTIMIZER_FILE))?;
        let adam = Adam::from_state(adam_config(config, state.iteration), &model.params, &opt_state)
            .ok_or_else(|| Error::Data("optimizer state does not match the model".into()))?;
        // drop records past the checkpoint; they will be produced again
        let kept: Vec<LogRecord> = if metrics.exists() {
            read_log(&metrics)?.into_iter().filter(|r| r.iter <= state.iteration).collect()
        } else {
            vec![]
        };
        write_log(&metrics, &kept, false)?;
        (model, adam, state.iteration)
    } else {
        let model = Model::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(adam_config(config, 0), &model.params);
        write_log(&metrics, &[], false)?;
        std::fs::write(out.join(CONFIG_FILE), config.serialize()).map_err(|e| Error::io(out, e))?;
        (model, adam, 0)
    };

    let batch = config.batch_size.min(data.len());
    let mut log = Vec::new();
    let mut pending = Vec::new();
    for iter in start + 1..=config.iterations {
        // per-iteration stream, so a resumed run draws what the original would have
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(config.seed ^ 0x7261_696E, iter));
        let indices = sample(&mut rng, data.len(), batch).into_vec();
        adam.config = adam_config(config, iter - 1);
        let report = train_step(&mut model, &mut adam, config, data, &indices, &mut rng)?;
        if iter % config.log_every == 0 || iter == config.iterations {
            let rec = LogRecord::new(iter, &report);
            progress(&rec);
            log.push(rec);
            pending.push(rec);
        }
        if iter % config.checkpoint_every == 0 || iter == config.iterations {
            write_log(&metrics, &pending, true)?;
            pending.clear();
            save(out, &model, &adam, iter, &hash)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        resumed_from: (start > 0).then_some(start),
    })
}
