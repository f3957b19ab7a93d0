use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cropformer::fusion::{EntityRecord, InferenceRecord};
use cropformer::synth::{annotation_path, read_index, SceneAnnotation};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cropformer")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let text = format!(
        "# tiny run for the command-line tests\n\
         model.queries = 6\nmodel.dim = 8\nmodel.dec_layers = 1\nmodel.heads = 2\n\
         model.widths = 4,4,6,8\nmodel.ffn_dim = 12\nmodel.input_size = 32\n\
         iterations = 2\nbatch_size = 2\n\
         corpus.images = 10\ncorpus.resolution = 48\n\
         corpus.dir = {}\nout.dir = {}\n\
         threshold.score = 0.05\n",
        dir.join("corpus").display(),
        dir.join("run").display()
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_one() {
    let o = run(&["stats"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--config is required"));
    assert!(stderr(&o).contains("Usage"));

    let o = run(&["stats", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not found"));

    assert_eq!(code(&run(&["stats", "--frobnicate"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let o = run(&["stats", "--config", cfg, "--delta", "1.5"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&run(&["infer", "--config", cfg, "--decoder-mode", "x-y"])), 1);
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "delta = 0.5\nunknown = 3\n").unwrap();
    assert_eq!(code(&run(&["stats", "--config", bad.to_str().unwrap()])), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = run(&["stats", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let junk = tmp.path().join("junk.json");
    std::fs::write(&junk, "not json").unwrap();
    assert_eq!(code(&run(&["eval", junk.to_str().unwrap(), "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn synth_train_infer_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();
    let o = run(&["synth", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("8 train and 2 test"));

    let o = run(&["stats", "--config", cfg, "--out", tmp.path().join("stats.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("entities (mean)"));
    assert!(tmp.path().join("stats.json").exists());

    let corpus = tmp.path().join("corpus");
    let index = read_index(&corpus).unwrap();
    let truth: Vec<InferenceRecord> = index
        .test
        .iter()
        .map(|id| {
            let text = std::fs::read_to_string(annotation_path(&corpus, id)).unwrap();
            let ann: SceneAnnotation = serde_json::from_str(&text).unwrap();
            InferenceRecord {
                image_id: id.clone(),
                entities: ann
                    .entities
                    .iter()
                    .enumerate()
                    .map(|(k, e)| EntityRecord { score: 0.9 - 0.01 * k as f64, rle: e.rle.clone() })
                    .collect(),
            }
        })
        .collect();
    let truth_path = tmp.path().join("truth.json");
    std::fs::write(&truth_path, serde_json::to_string(&truth).unwrap()).unwrap();
    let o = run(&["eval", truth_path.to_str().unwrap(), "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("AP^e   100.0"), "{}", stdout(&o));
    assert!(stdout(&o).contains("AP^b   100.0"));

    let o = run(&["train", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("run").join("model.crpf").exists());

    let infer = |mode: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = run(&["infer", "--config", cfg, "--delta", "1.0", "--decoder-mode", mode, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    let boc = infer("b-oc", "boc.json");
    let bo = infer("b-o", "bo.json");
    assert_eq!(boc, bo);
    let records: Vec<InferenceRecord> = serde_json::from_slice(&boc).unwrap();
    assert_eq!(records.len(), 2);

    let img = cropformer::synth::image_path(&corpus, &index.test[0]);
    let single = tmp.path().join("single.json");
    let o = run(&["infer", img.to_str().unwrap(), "--config", cfg, "--out", single.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["eval", single.to_str().unwrap(), "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("images 1\n"));
}
