use std::path::{Path, PathBuf};

use cropformer::config::{Config, KEYS};
use cropformer::fusion::DecoderMode;
use cropformer::geometry::CropSet;
use cropformer::model::ModelConfig;
use cropformer::synth::{load_scene, read_index, synth_corpus, MAX_ENTITIES, MIN_ENTITIES};
use cropformer::train::{load_model, read_log, saved_iteration, train, TrainingSet, METRICS_FILE, MODEL_FILE, STATE_FILE};
use cropformer::Error;
use cropformer_autodiff::{load_checkpoint, save_checkpoint, Real};
use proptest::prelude::*;

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_config(root: &Path) -> Config {
    let mut c = Config::default();
    c.model = ModelConfig {
        queries: 6,
        dim: 8,
        dec_layers: 1,
        heads: 2,
        widths: [4, 4, 6, 8],
        ffn_dim: 12,
        input_size: 32,
        assoc_self_attn: true,
        assoc_ffn: true,
    };
    c.corpus_images = 10;
    c.corpus_resolution = 48;
    c.corpus_dir = root.join("corpus");
    c.out_dir = root.join("run");
    c.iterations = 4;
    c.batch_size = 2;
    c.checkpoint_every = 2;
    c.validate().unwrap();
    c
}

fn with_corpus(c: &Config) {
    synth_corpus(&c.corpus_dir, c.corpus_images, c.corpus_resolution, c.corpus_seed).unwrap();
}

/// Runs `train`, abandoning it when iteration `stop` is logged (before its checkpoint).
fn train_until(c: &Config, out: &Path, stop: usize) {
    let data = TrainingSet::load(c).unwrap();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        train(c, &data, out, |rec| {
            if rec.iter == stop {
                panic!("interrupted");
            }
        })
    }));
    assert!(r.is_err());
}

#[test]
fn corpus_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth_corpus(&a, 5, 64, 7).unwrap();
    synth_corpus(&b, 5, 64, 7).unwrap();
    synth_corpus(&c, 5, 64, 8).unwrap();
    let fa = files(&a);
    assert_eq!(fa.len(), 11);
    assert_eq!(fa, files(&b));
    assert_ne!(fa, files(&c));
}

#[test]
fn default_corpus_split_and_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    let index = synth_corpus(tmp.path(), 250, 32, 0).unwrap();
    assert_eq!((index.train.len(), index.test.len()), (200, 50));
    assert_eq!(read_index(tmp.path()).unwrap(), index);
    let mut ids: Vec<&String> = index.train.iter().chain(&index.test).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 250);
    for id in index.test.iter().take(20) {
        let (image, scene) = load_scene(tmp.path(), id).unwrap();
        scene.validate().unwrap();
        assert_eq!((image.width, image.height, scene.width), (32, 32, 32));
        assert!((MIN_ENTITIES..=MAX_ENTITIES).contains(&scene.entities.len()));
    }
    assert!(synth_corpus(&tmp.path().join("x"), 4, 16, 0).is_err());
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(tmp.path());
    c.iterations = 1;
    with_corpus(&c);
    let data = TrainingSet::load(&c).unwrap();
    let out = train(&c, &data, &c.out_dir, |_| {}).unwrap();
    assert_eq!(out.log.len(), 1);
    let path = c.out_dir.join(MODEL_FILE);
    let loaded = load_model(&c, &path).unwrap();
    assert_eq!(loaded.params, out.model.params);
    let again = tmp.path().join("again.crpf");
    save_checkpoint(&loaded.params, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(saved_iteration(&c, &c.out_dir).unwrap(), Some(1));
    // a run directory of another configuration is refused
    let mut other = c.clone();
    other.seed = 5;
    assert_eq!(saved_iteration(&other, &c.out_dir).unwrap(), None);
    assert!(matches!(train(&other, &data, &c.out_dir, |_| {}), Err(Error::Param(_))));
}

#[test]
fn interrupted_runs_resume_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(tmp.path());
    with_corpus(&c);
    let data = TrainingSet::load(&c).unwrap();
    let straight = train(&c, &data, &tmp.path().join("straight"), |_| {}).unwrap();

    let split = tmp.path().join("split");
    train_until(&c, &split, 3);
    assert_eq!(saved_iteration(&c, &split).unwrap(), Some(2));
    let resumed = train(&c, &data, &split, |_| {}).unwrap();
    assert_eq!(resumed.resumed_from, Some(2));
    assert_eq!(resumed.model.params, straight.model.params);
    let a = read_log(&tmp.path().join("straight").join(METRICS_FILE)).unwrap();
    let b = read_log(&split.join(METRICS_FILE)).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn non_finite_training_stops_without_touching_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(tmp.path());
    with_corpus(&c);
    let out = tmp.path().join("run");
    train_until(&c, &out, 3);
    let model_path = out.join(MODEL_FILE);
    let mut params = load_checkpoint(&model_path).unwrap();
    let id = params.find("head.mask2.bias").unwrap();
    params.get_mut(id).data_mut()[0] = Real::NAN;
    save_checkpoint(&params, &model_path).unwrap();
    let before = (std::fs::read(&model_path).unwrap(), std::fs::read(out.join(STATE_FILE)).unwrap());

    let data = TrainingSet::load(&c).unwrap();
    match train(&c, &data, &out, |_| {}) {
        Err(Error::NonFinite(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on NaN parameters succeeded"),
    }
    let after = (std::fs::read(&model_path).unwrap(), std::fs::read(out.join(STATE_FILE)).unwrap());
    assert!(before == after, "checkpoint changed");
    assert_eq!(saved_iteration(&c, &out).unwrap(), Some(2));
    assert!(read_log(&out.join(METRICS_FILE)).unwrap().iter().all(|r| r.iter <= 2));
}

#[test]
fn training_identity_ignores_inference_and_output_settings() {
    let base = Config::default();
    let h = base.training_hash();
    let mut c = base.clone();
    c.decoder_mode = DecoderMode::IO;
    c.thresholds.score = 0.6;
    c.out_dir = "elsewhere".into();
    c.corpus_dir = "another".into();
    c.ablate_seeds = vec![9];
    assert_eq!(c.training_hash(), h);
    assert_ne!(c.hash(), base.hash());
    for (key, value) in [("seed", "1"), ("delta", "0.5"), ("optim.lr", "0.002"), ("corpus.seed", "3"), ("crops", "random")] {
        let mut c = base.clone();
        c.set(key, value).unwrap();
        assert_ne!(c.training_hash(), h, "{key}");
    }
}

#[test]
fn config_text_errors() {
    assert!(Config::parse("delta = 0.5\ndelta = 0.6\n").is_err());
    assert!(Config::parse("no_such_key = 1\n").is_err());
    assert!(Config::parse("delta 0.5\n").is_err());
    assert!(Config::parse("delta = 1.5\n").is_err());
    assert!(Config::parse("crops = fixed9\n").is_err());
    assert!(Config::parse("model.input_size = 100\n").is_err());
    let c = Config::parse("# comment\n\n  seed = 7   # trailing\ndecoder_mode = b-c\n").unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.decoder_mode, DecoderMode::BC);
    assert_eq!(Config::parse("").unwrap(), Config::default());
    assert_eq!(Config::default().serialize().lines().count(), KEYS.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_serialisation_round_trips(
        delta in 0.01f64..=1.0,
        lr in 1e-6f64..1.0,
        seed in any::<u64>(),
        iterations in 1usize..100_000,
        mode in 0usize..4,
        random in any::<bool>(),
        deltas in proptest::collection::vec(0.05f64..=1.0, 1..4),
        seeds in proptest::collection::vec(any::<u64>(), 1..4),
        score in 0.01f64..0.99,
    ) {
        let mut c = Config::default();
        c.delta = delta;
        c.optim.lr = lr;
        c.seed = seed;
        c.iterations = iterations;
        c.decoder_mode = DecoderMode::ALL[mode];
        c.crops = if random { CropSet::Random } else { CropSet::Fixed4 };
        c.ablate_deltas = deltas;
        c.ablate_seeds = seeds;
        c.thresholds.score = score;
        c.out_dir = format!("runs/{seed}").into();
        c.validate().unwrap();
        let text = c.serialize();
        let back = Config::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}
