//! Run configuration as flat `key = value` lines with `#` comments.
//! Every key has a default; unknown or repeated keys are rejected.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{DecoderMode, Thresholds};
use crate::geometry::CropSet;
use crate::loss::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Optim {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Fraction of the run after which the learning rate drops tenfold; 1 disables.
    pub lr_drop: f64,
}

impl Default for Optim {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            lr_drop: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub delta: f64,
    pub crops: CropSet,
    pub decoder_mode: DecoderMode,
    pub loss: LossWeights,
    pub optim: Optim,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Iterations between metric records.
    pub log_every: usize,
    /// Iterations between checkpoints; the final iteration is always saved.
    pub checkpoint_every: usize,
    pub corpus_images: usize,
    pub corpus_resolution: usize,
    pub corpus_seed: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Ablation grid: crop ratios, crop sets and training seeds.
    pub ablate_deltas: Vec<f64>,
    pub ablate_crops: Vec<CropSet>,
    pub ablate_seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            delta: 0.7,
            crops: CropSet::Fixed4,
            decoder_mode: DecoderMode::BOC,
            loss: LossWeights::default(),
            optim: Optim::default(),
            thresholds: Thresholds::default(),
            seed: 0,
            iterations: 2000,
            batch_size: 4,
            log_every: 1,
            checkpoint_every: 500,
            corpus_images: 250,
            corpus_resolution: 1024,
            corpus_seed: 0,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            ablate_deltas: vec![0.5, 0.7],
            ablate_crops: vec![CropSet::Fixed4],
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::Param(format!("cannot parse {s:?} as {}", stringify!($t))))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl Value for [usize; 4] {
    fn parse_value(s: &str) -> Result<Self> {
        let v: Vec<usize> = s.split(',').map(|p| usize::parse_value(p.trim())).collect::<Result<_>>()?;
        v.try_into()
            .map_err(|_| Error::Param(format!("expected four comma-separated widths, got {s:?}")))
    }
    fn render(&self) -> String {
        self.map(|w| w.to_string()).join(",")
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        let v: Vec<T> = s.split(',').map(|p| T::parse_value(p.trim())).collect::<Result<_>>()?;
        Ok(v)
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

impl Value for CropSet {
    fn parse_value(s: &str) -> Result<Self> {
        CropSet::parse(s)
    }
    fn render(&self) -> String {
        self.label().into()
    }
}

impl Value for DecoderMode {
    fn parse_value(s: &str) -> Result<Self> {
        DecoderMode::parse(s)
    }
    fn render(&self) -> String {
        self.label().to_ascii_lowercase()
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in serialisation order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set(c: &mut Config, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => c.$($field).+ = Value::parse_value(value)
                    .map_err(|e| Error::Param(format!("{key}: {e}")))?,)*
                _ => return Err(Error::Param(format!("unknown config key {key:?}"))),
            }
            Ok(())
        }

        fn entries(c: &Config) -> Vec<(&'static str, String)> {
            vec![$(($key, c.$($field).+.render())),*]
        }
    };
}

keys! {
    "model.queries" => model.queries;
    "model.dim" => model.dim;
    "model.dec_layers" => model.dec_layers;
    "model.heads" => model.heads;
    "model.widths" => model.widths;
    "model.ffn_dim" => model.ffn_dim;
    "model.input_size" => model.input_size;
    "model.assoc_self_attn" => model.assoc_self_attn;
    "model.assoc_ffn" => model.assoc_ffn;
    "delta" => delta;
    "crops" => crops;
    "decoder_mode" => decoder_mode;
    "loss.image.ce" => loss.image.ce;
    "loss.image.bce" => loss.image.bce;
    "loss.image.dice" => loss.image.dice;
    "loss.batch.ce" => loss.batch.ce;
    "loss.batch.bce" => loss.batch.bce;
    "loss.batch.dice" => loss.batch.dice;
    "optim.lr" => optim.lr;
    "optim.beta1" => optim.beta1;
    "optim.beta2" => optim.beta2;
    "optim.eps" => optim.eps;
    "optim.weight_decay" => optim.weight_decay;
    "optim.max_grad_norm" => optim.max_grad_norm;
    "optim.lr_drop" => optim.lr_drop;
    "threshold.mask" => thresholds.mask;
    "threshold.score" => thresholds.score;
    "seed" => seed;
    "iterations" => iterations;
    "batch_size" => batch_size;
    "log_every" => log_every;
    "checkpoint_every" => checkpoint_every;
    "corpus.images" => corpus_images;
    "corpus.resolution" => corpus_resolution;
    "corpus.seed" => corpus_seed;
    "corpus.dir" => corpus_dir;
    "out.dir" => out_dir;
    "ablate.deltas" => ablate_deltas;
    "ablate.crops" => ablate_crops;
    "ablate.seeds" => ablate_seeds;
}

impl Config {
    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Param(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Param(format!("line {}: repeated key {key:?}", i + 1)));
            }
            set(&mut c, key, value.trim()).map_err(|e| Error::Param(format!("line {}: {e}", i + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides one key, as from the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set(self, key, value)?;
        self.validate()
    }

    /// Every key with its value, one per line.
    pub fn serialize(&self) -> String {
        entries(self).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the serialised form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.serialize().as_bytes()))
    }

    /// Hash of the keys that influence training. Output location, inference
    /// settings and the ablation grid are left out, and the corpus is
    /// identified by its generation keys rather than its directory.
    pub fn training_hash(&self) -> String {
        let d = Config::default();
        let c = Config {
            decoder_mode: d.decoder_mode,
            thresholds: d.thresholds,
            corpus_dir: d.corpus_dir,
            out_dir: d.out_dir,
            ablate_deltas: d.ablate_deltas,
            ablate_crops: d.ablate_crops,
            ablate_seeds: d.ablate_seeds,
            ..self.clone()
        };
        c.hash()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.thresholds.validate()?;
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Param(format!("delta {} outside (0, 1]", self.delta)));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Param(format!("learning rate {} must be positive", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Param("Adam betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0 && o.max_grad_norm >= 0.0) {
            return Err(Error::Param("optimizer eps must be positive, decay and clip non-negative".into()));
        }
        if !(o.lr_drop > 0.0 && o.lr_drop <= 1.0) {
            return Err(Error::Param(format!("lr_drop {} outside (0, 1]", o.lr_drop)));
        }
        for (name, t) in [("image", &self.loss.image), ("batch", &self.loss.batch)] {
            if [t.ce, t.bce, t.dice].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::Param(format!("{name} loss weights must be finite and non-negative")));
            }
        }
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Param("batch_size, log_every and checkpoint_every must be positive".into()));
        }
        if self.ablate_deltas.is_empty() || self.ablate_crops.is_empty() || self.ablate_seeds.is_empty() {
            return Err(Error::Param("ablation grid axes must be non-empty".into()));
        }
        if self.ablate_deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::Param("ablation ratios must lie in (0, 1]".into()));
        }
        if self.corpus_images == 0 || self.corpus_resolution < 32 {
            return Err(Error::Param("corpus needs at least one image of side 32 or more".into()));
        }
        Ok(())
    }
}
