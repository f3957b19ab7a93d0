//! `cropformer` command-line harness.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on
//! data errors (unreadable or inconsistent inputs, non-finite training).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use cropformer::config::Config;
use cropformer::experiment::{ablate, corpus_stats, evaluate_records};
use cropformer::fusion::{run_inference, InferenceRecord};
use cropformer::geometry::CropSet;
use cropformer::imageio::read_image;
use cropformer::synth::{image_path, read_index, synth_corpus};
use cropformer::train::{load_model, train, TrainingSet, MODEL_FILE};
use cropformer::Error;

#[derive(Parser, Debug)]
#[command(name = "cropformer", version, about = "Multi-view entity segmentation on synthetic high-resolution scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat key = value file).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Crop ratio.
    #[arg(long, global = true, value_name = "R")]
    delta: Option<f64>,
    /// Training crop placement: fixed4 or random.
    #[arg(long, global = true, value_name = "SET")]
    crops: Option<String>,
    /// Inference source: i-o, b-o, b-c or b-oc.
    #[arg(long = "decoder-mode", global = true, value_name = "MODE")]
    decoder_mode: Option<String>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output location; its meaning depends on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (`--out` overrides corpus.dir, `--seed` corpus.seed).
    Synth,
    /// Train a model (`--out` overrides out.dir).
    Train,
    /// Predict entity maps for images, or for the test split when none are given.
    Infer {
        images: Vec<PathBuf>,
    },
    /// Score a predictions file against the corpus annotations.
    Eval {
        predictions: PathBuf,
    },
    /// Dataset statistics of the corpus.
    Stats,
    /// Train and evaluate the ablation grid (`--delta`, `--crops`, `--seed` pin one axis).
    Ablate,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

fn usage() -> String {
    Cli::command().render_usage().to_string()
}

/// Config file plus command-line overrides.
fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required".into()))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let mut c = Config::load(path)?;
    if let Some(d) = cli.delta {
        c.set("delta", &d.to_string())?;
    }
    if let Some(s) = &cli.crops {
        c.set("crops", s)?;
    }
    if let Some(m) = &cli.decoder_mode {
        c.set("decoder_mode", m)?;
    }
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            if let Some(s) = cli.seed {
                config.corpus_seed = s;
            }
            if let Some(o) = &cli.out {
                config.corpus_dir = o.clone();
            }
            let index = synth_corpus(
                &config.corpus_dir,
                config.corpus_images,
                config.corpus_resolution,
                config.corpus_seed,
            )?;
            println!(
                "wrote {} train and {} test scenes to {}",
                index.train.len(),
                index.test.len(),
                config.corpus_dir.display()
            );
        }
        Command::Train => {
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(o) = &cli.out {
                config.out_dir = o.clone();
            }
            let data = TrainingSet::load(&config)?;
            let every = (config.iterations / 20).max(1);
            let outcome = train(&config, &data, &config.out_dir, |r| {
                if r.iter % every == 0 {
                    eprintln!("iter {:>6}  loss {:.4}", r.iter, r.total);
                }
            })?;
            if let Some(from) = outcome.resumed_from {
                eprintln!("resumed from iteration {from}");
            }
            let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} iterations, final loss {last:.4}, model {}",
                config.iterations,
                config.out_dir.join(MODEL_FILE).display()
            );
        }
        Command::Infer { images } => {
            let model = load_model(&config, &config.out_dir.join(MODEL_FILE))?;
            let inputs: Vec<(String, PathBuf)> = if images.is_empty() {
                let index = read_index(&config.corpus_dir)?;
                index
                    .test
                    .iter()
                    .map(|id| (id.clone(), image_path(&config.corpus_dir, id)))
                    .collect()
            } else {
                images
                    .iter()
                    .map(|p| {
                        let id = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                        (id, p.clone())
                    })
                    .collect()
            };
            let mut records = Vec::with_capacity(inputs.len());
            for (id, path) in &inputs {
                let image = read_image(path)?;
                let map = run_inference(&model, &image, config.delta, config.decoder_mode, &config.thresholds)?;
                records.push(InferenceRecord::from_map(id.clone(), &map));
            }
            let out = cli.out.clone().unwrap_or_else(|| config.out_dir.join("predictions.json"));
            write_text(&out, &(serde_json::to_string(&records).expect("serialisable") + "\n"))?;
            println!(
                "{} images, decoder {}, delta {}: predictions in {}",
                records.len(),
                config.decoder_mode,
                config.delta,
                out.display()
            );
        }
        Command::Eval { predictions } => {
            let text = std::fs::read_to_string(predictions)
                .map_err(|e| Failure::Data(format!("{}: {e}", predictions.display())))?;
            let records: Vec<InferenceRecord> =
                serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", predictions.display())))?;
            let report = evaluate_records(&config.corpus_dir, &records)?;
            println!("images {}", report.images);
            println!("AP^e   {:.1}", 100.0 * report.ap_e.ap);
            println!("AP^e50 {:.1}", 100.0 * report.ap_e.at(0.5).unwrap_or(0.0));
            println!("AP^e75 {:.1}", 100.0 * report.ap_e.at(0.75).unwrap_or(0.0));
            println!("AP^b   {:.1}", 100.0 * report.ap_b.ap);
            if let Some(o) = &cli.out {
                write_text(o, &to_json(&report))?;
            }
        }
        Command::Stats => {
            let s = corpus_stats(&config.corpus_dir)?;
            println!("{:<20} {:>12}", "images", s.images);
            println!("{:<20} {:>12}", "resolution", format!("{:.0}x{:.0}", s.resolution.0, s.resolution.1));
            println!("{:<20} {:>12.2}", "entities (mean)", s.entity_count_mean);
            println!("{:<20} {:>12}", "entities (max)", s.entity_count_max);
            println!("{:<20} {:>12.3}", "valid area", s.valid_area);
            println!("{:<20} {:>12.3}", "entity complexity", s.complexity);
            println!("{:<20} {:>12.3}", "entity simplicity", s.simplicity);
            if let Some(o) = &cli.out {
                write_text(o, &to_json(&s))?;
            }
        }
        Command::Ablate => {
            if let Some(o) = &cli.out {
                config.out_dir = o.clone();
            }
            if let Some(d) = cli.delta {
                config.ablate_deltas = vec![d];
            }
            if let Some(c) = &cli.crops {
                config.ablate_crops = vec![CropSet::parse(c)?];
            }
            if let Some(s) = cli.seed {
                config.ablate_seeds = vec![s];
            }
            config.validate()?;
            let report = ablate(&config, |m| eprintln!("{m}"))?;
            let table = report.table();
            print!("{table}");
            write_text(&config.out_dir.join("ablation.txt"), &table)?;
            write_text(&config.out_dir.join("ablation.json"), &to_json(&report))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\n{}", usage());
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

