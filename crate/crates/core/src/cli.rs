//! Command-line front end: `synth`, `preprocess`, `train`, `eval`, `flops`.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, configs, data
//! contracts), 2 failure while doing the work. Inputs are validated before
//! any output file is created. Every subcommand that writes output also
//! writes `stamp.json` with its arguments, seeds, config hash and version.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::complexity::compare_with_reference;
use crate::data_synth::{build_dataset, DatasetSpec, Manifest, Perturbation, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_det_csv, ScoreMode};
use crate::imageproc::{read_image, tan_triggs_pipeline, write_pgm};
use crate::model::PocVit;
use crate::training::{load_samples, train_loop, ExperimentConfig, RunLayout};

pub const THREADS_ENV: &str = "POCVIT_THREADS";
pub const EXPERIMENT_FILE: &str = "experiment.json";

#[derive(Parser, Debug)]
#[command(name = "pocvit", version, about = "Dual-trait POC cross-attention transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoreArg {
    Template,
    Softmax,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run adaptive Tan-Triggs over every PGM/PNG under a directory.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Seed for minibatch order.
        #[arg(long)]
        seed: Option<u64>,
        /// Seed for weight initialization.
        #[arg(long)]
        model_seed: Option<u64>,
        #[arg(long)]
        preprocess: bool,
        /// Continue from the run's saved state.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy, EER, TAR@FAR and DET curve of a trained checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// `best`, `last`, or a checkpoint directory.
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<run>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScoreArg::Template)]
        score_mode: ScoreArg,
        /// Force Tan-Triggs preprocessing even if the run trained without it.
        #[arg(long)]
        preprocess: bool,
    },
    /// Parameter and FLOP report for a config.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write `complexity.json` and `stamp.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Stamp {
    command: String,
    args: Vec<String>,
    version: &'static str,
    seeds: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_sha256: Option<String>,
    threads: usize,
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    format!("{:x}", Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn stamp(command: &str, args: &[String], seeds: &[(&str, u64)], config: Option<String>) -> Stamp {
    Stamp {
        command: command.into(),
        args: args.to_vec(),
        version: env!("CARGO_PKG_VERSION"),
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        config_sha256: config,
        threads: rayon::current_num_threads(),
    }
}

fn write_stamp(dir: &Path, command: &str, args: &[String], seeds: &[(&str, u64)], config: Option<String>) -> Result<()> {
    write_json(&dir.join("stamp.json"), &stamp(command, args, seeds, config))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(Error::Config(format!("config file {} not found", path.display())));
    }
    ExperimentConfig::load(path)
}

fn open_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::Data(format!("dataset {} not found", path.display())));
    }
    Manifest::open(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
    // A pool may already exist when run() is called more than once in one
    // process; the first setting wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = configure_threads().and_then(|_| dispatch(cli.command, &args));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::Synth {
            subjects,
            frames,
            seed,
            size,
            out,
        } => synth(subjects, frames, seed, size, &out, args),
        Command::Preprocess { input, out } => preprocess(&input, &out, args),
        Command::Train {
            config,
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            model_seed,
            preprocess,
            resume,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = model_seed {
                cfg.model.seed = v;
            }
            cfg.train.preprocess |= preprocess;
            train(cfg, &data, &out, resume, args)
        }
        Command::Eval {
            run,
            checkpoint,
            data,
            out,
            score_mode,
            preprocess,
        } => {
            let mode = match score_mode {
                ScoreArg::Template => ScoreMode::Template,
                ScoreArg::Softmax => ScoreMode::Softmax,
            };
            eval(&run, &checkpoint, &data, out, mode, preprocess, args)
        }
        Command::Flops { config, json, out } => flops(&config, json, out.as_deref(), args),
    }
}

fn synth(subjects: usize, frames: usize, seed: u64, size: usize, out: &Path, args: &[String]) -> Result<()> {
    if subjects == 0 || frames == 0 {
        return Err(Error::Parameter("--subjects and --frames must be positive".into()));
    }
    if size < 8 {
        return Err(Error::Parameter(format!("--size {size} is below 8 pixels")));
    }
    let spec = DatasetSpec {
        n_subjects: subjects,
        frames_per_subject: frames,
        seed,
        image_size: size,
        perturbation: Perturbation::default(),
    };
    let m = build_dataset(&spec, out)?;
    write_stamp(out, "synth", args, &[("dataset_seed", seed)], Some(sha256_json(&spec)))?;
    log::info!("wrote {} frame pairs to {}", m.entries.len(), out.display());
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm") | Some("png")
    )
}

fn preprocess(input: &Path, out: &Path, args: &[String]) -> Result<()> {
    if !input.is_dir() {
        return Err(Error::Parameter(format!("--in {} is not a directory", input.display())));
    }
    let same = match (input.canonicalize(), out.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(Error::Parameter("--in and --out must differ".into()));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(input).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", input.display())))?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            files.push(entry.path().strip_prefix(input).expect("under input").to_path_buf());
        }
    }
    let manifest = input.join(MANIFEST_FILE);
    let manifest = if manifest.exists() { Some(Manifest::load(&manifest)?) } else { None };
    create_dir(out)?;
    files.par_iter().try_for_each(|rel| -> Result<()> {
        let img = read_image(&input.join(rel))?;
        let (enhanced, params) = tan_triggs_pipeline(&img)?;
        let target = out.join(rel).with_extension("pgm");
        if let Some(parent) = target.parent() {
            create_dir(parent)?;
        }
        write_pgm(&target, &enhanced)?;
        write_json(&target.with_extension("att.json"), &params)
    })?;
    if let Some(mut m) = manifest {
        for e in &mut m.entries {
            e.forehead.set_extension("pgm");
            e.periocular.set_extension("pgm");
        }
        m.save(&out.join(MANIFEST_FILE))?;
    }
    write_stamp(out, "preprocess", args, &[], None)?;
    log::info!("preprocessed {} images into {}", files.len(), out.display());
    Ok(())
}

fn train(cfg: ExperimentConfig, data: &Path, out: &Path, resume: bool, args: &[String]) -> Result<()> {
    cfg.validate()?;
    let manifest = open_manifest(data)?;
    if cfg.model.n_classes != manifest.n_classes() {
        return Err(Error::Config(format!(
            "config has {} classes, dataset has {}",
            cfg.model.n_classes,
            manifest.n_classes()
        )));
    }
    if cfg.model.image_size != manifest.image_size {
        return Err(Error::Config(format!(
            "config expects {} pixel images, dataset has {}",
            cfg.model.image_size, manifest.image_size
        )));
    }
    if resume && !RunLayout::new(out).state().join("state.json").exists() {
        return Err(Error::Config(format!("nothing to resume in {}", out.display())));
    }
    let model = PocVit::new(cfg.model.clone())?;
    create_dir(out)?;
    write_json(&out.join(EXPERIMENT_FILE), &cfg)?;
    let outcome = train_loop(model, &manifest, &cfg.train, out, resume)?;
    write_stamp(
        out,
        "train",
        args,
        &[
            ("dataset_seed", manifest.dataset_seed),
            ("model_seed", cfg.model.seed),
            ("train_seed", cfg.train.seed),
        ],
        Some(sha256_json(&cfg)),
    )?;
    log::info!(
        "best validation accuracy {:.2}% at epoch {}",
        outcome.best_val_acc,
        outcome.best_epoch
    );
    Ok(())
}

fn eval(
    run: &Path,
    checkpoint: &str,
    data: &Path,
    out: Option<PathBuf>,
    mode: ScoreMode,
    force_preprocess: bool,
    args: &[String],
) -> Result<()> {
    let layout = RunLayout::new(run);
    let ckpt = match checkpoint {
        "best" => layout.best(),
        "last" => layout.last(),
        other => PathBuf::from(other),
    };
    if !ckpt.join("model.json").exists() {
        return Err(Error::Config(format!("no checkpoint at {}", ckpt.display())));
    }
    let experiment = run.join(EXPERIMENT_FILE);
    let trained_with = if experiment.exists() {
        Some(ExperimentConfig::load(&experiment)?)
    } else {
        None
    };
    let preprocess = force_preprocess || trained_with.as_ref().is_some_and(|c| c.train.preprocess);
    let manifest = open_manifest(data)?;
    let model = PocVit::load(&ckpt)?;
    if model.config().n_classes != manifest.n_classes() || model.config().image_size != manifest.image_size {
        return Err(Error::Config("checkpoint does not match the dataset".into()));
    }
    let out = out.unwrap_or_else(|| run.join("eval"));
    let train = load_samples(&manifest, Split::Train, preprocess)?;
    let test = load_samples(&manifest, Split::Test, preprocess)?;
    let (report, curves) = evaluate(&model, &train, &test, mode)?;
    create_dir(&out)?;
    report.write_json(&out.join("metrics.json"))?;
    write_det_csv(&out.join("det.csv"), &curves)?;
    let mut seeds = vec![("dataset_seed", manifest.dataset_seed), ("model_seed", model.config().seed)];
    if let Some(c) = &trained_with {
        seeds.push(("train_seed", c.train.seed));
    }
    write_stamp(&out, "eval", args, &seeds, trained_with.as_ref().map(sha256_json))?;
    println!(
        "accuracy {:.2}%  EER {:.3}%  TAR@FAR=0.1% {:.2}%",
        report.accuracy, report.eer, report.tar_at_far_0p1
    );
    Ok(())
}

fn flops(config: &Path, json: bool, out: Option<&Path>, args: &[String]) -> Result<()> {
    let cfg = load_config(config)?;
    let report = compare_with_reference(&cfg.model)?;
    let seeds = [("model_seed", cfg.model.seed)];
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    } else {
        print!("{report}");
    }
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("complexity.json"), &report)?;
            write_stamp(dir, "flops", args, &seeds, Some(sha256_json(&cfg)))
        }
        None => {
            let s = stamp("flops", args, &seeds, Some(sha256_json(&cfg)));
            eprintln!("stamp: {}", serde_json::to_string(&s).expect("serializable"));
            Ok(())
        }
    }
}
