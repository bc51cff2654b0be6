//! Subcommand dispatch: synth, train, crossval, eval, predict, explain,
//! bench. Exit codes: 0 success, 2 usage/config error, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use densepipe_core::checkpoint::{model_from_checkpoint, transfer, Checkpoint};
use densepipe_core::error::Error;
use densepipe_core::gradcam::{colorize_overlay, gradcam, upsample_bilinear};
use densepipe_core::graph::{HeadConfig, ModelGraph};
use densepipe_core::manifest::{kfold, stratified_split, DatasetManifest, ManifestEntry, SplitSpec};
use densepipe_core::metrics::{confusion, metrics, predict_labels, predict_probs};
use densepipe_core::synth::generate_with_labels;
use densepipe_core::train::{train, Sample};

use crate::bench::bench_inference;
use crate::config::{load_config, CliConfig, ConfigError};
use crate::dataset;
use crate::imageio;
use crate::report::{CrossvalReport, FoldResult, RunReport};

const USAGE: &str = "usage: densepipe <subcommand> [--config FILE] [--key value ...]

subcommands:
  synth     generate a synthetic dataset      (--out DIR [--n N --seed S --resolution R --balance B])
  train     train a model                     (--manifest FILE --out DIR [--checkpoint FILE --freeze backbone])
  crossval  k-fold cross-validation           (--manifest FILE --out DIR [--k K])
  eval      evaluate a checkpoint             (--checkpoint FILE --manifest FILE --out DIR)
  predict   print per-image predictions       (--checkpoint FILE --image FILE | --manifest FILE)
  explain   write Grad-CAM overlays           (--checkpoint FILE --out DIR --image FILE | --manifest FILE)
  bench     measure inference latency         (--checkpoint FILE --manifest FILE [--warmup W --runs R])

any config-file key can be given as a flag, e.g. --epochs 10 --learning_rate 0.001";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub fn dispatch(argv: &[String]) -> i32 {
    match run(argv) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let (cmd, cfg) = parse_args(argv)?;
    match cmd.as_str() {
        "synth" => cmd_synth(&cfg),
        "train" => cmd_train(&cfg),
        "crossval" => cmd_crossval(&cfg),
        "eval" => cmd_eval(&cfg),
        "predict" => cmd_predict(&cfg),
        "explain" => cmd_explain(&cfg),
        "bench" => cmd_bench(&cfg),
        other => Err(CliError::Usage(format!("unknown subcommand '{other}'"))),
    }
}

fn parse_args(argv: &[String]) -> Result<(String, CliConfig), CliError> {
    let cmd = argv
        .first()
        .ok_or_else(|| CliError::Usage("missing subcommand".into()))?
        .clone();
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < argv.len() {
        let flag = &argv[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected a --flag, got '{flag}'")))?;
        let value = argv
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("flag --{key} needs a value")))?;
        if key == "config" {
            config_path = Some(value.clone());
        } else {
            overrides.push((key.to_string(), value.clone()));
        }
        i += 2;
    }
    let cfg = load_config(config_path.as_deref(), &overrides)?;
    Ok((cmd, cfg))
}

fn require<'a>(opt: &'a Option<String>, flag: &str) -> Result<&'a str, CliError> {
    opt.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn read_checkpoint(path: &str) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read checkpoint {path}: {e}")))?;
    Checkpoint::decode(&bytes).map_err(|e| CliError::Runtime(format!("{path}: {e}")))
}

fn load_model(path: &str) -> Result<ModelGraph, CliError> {
    let ckpt = read_checkpoint(path)?;
    model_from_checkpoint(&ckpt).map_err(|e| CliError::Runtime(format!("{path}: {e}")))
}

/// Manifest + decoded samples at the model's resolution/channel count.
fn load_set(
    manifest_path: &str,
    model: &ModelGraph,
) -> Result<(DatasetManifest, Vec<Sample>), CliError> {
    let path = Path::new(manifest_path);
    let manifest = dataset::read_manifest(path)?;
    let samples = dataset::load_samples(
        path,
        &manifest,
        model.config.input_resolution,
        model.config.in_channels,
    )?;
    Ok((manifest, samples))
}

fn eval_metrics(
    model: &mut ModelGraph,
    set: &[Sample],
) -> Result<(densepipe_core::metrics::ConfusionMatrix, densepipe_core::metrics::MetricsReport), CliError>
{
    let predicted = predict_labels(model, set)?;
    let actual: Vec<usize> = set.iter().map(|s| s.label).collect();
    let cm = confusion(&actual, &predicted)?;
    Ok((cm, metrics(&cm)?))
}

/// Rewrite entry paths to absolute so a split manifest is valid anywhere.
fn absolutize(manifest: &DatasetManifest, origin: &Path) -> DatasetManifest {
    let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| {
                let resolved = dataset::resolve_entry_path(origin, &e.path);
                let abs = if resolved.is_absolute() {
                    resolved
                } else {
                    cwd.join(resolved)
                };
                ManifestEntry {
                    path: abs.to_string_lossy().into_owned(),
                    label: e.label.clone(),
                    cue: e.cue,
                }
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &CliConfig) -> Result<(), CliError> {
    let out = require(&cfg.out_dir, "out")?;
    if cfg.n < 2 {
        return Err(CliError::Usage("synth needs --n >= 2".into()));
    }
    if cfg.resolution < 32 {
        return Err(CliError::Usage("synth needs --resolution >= 32".into()));
    }
    if !(0.0..=1.0).contains(&cfg.balance) {
        return Err(CliError::Usage("--balance must be in [0, 1]".into()));
    }
    let n0 = (cfg.n as f64 * cfg.balance).round() as usize;
    let n1 = cfg.n - n0;
    // interleave so any prefix stays close to the requested balance
    let mut labels = Vec::with_capacity(cfg.n);
    let (mut c0, mut c1) = (0usize, 0usize);
    for _ in 0..cfg.n {
        if c0 < n0 && (c1 >= n1 || c0 * n1 <= c1 * n0) {
            labels.push(0);
            c0 += 1;
        } else {
            labels.push(1);
            c1 += 1;
        }
    }
    let samples = generate_with_labels(cfg.resolution, cfg.resolve_seed(), &labels)?;
    let manifest_path = dataset::write_synth_dataset(Path::new(out), &samples)?;
    println!(
        "wrote {} images ({} female / {} male) and {}",
        cfg.n,
        n0,
        n1,
        manifest_path.display()
    );
    Ok(())
}

fn build_or_transfer(cfg: &CliConfig, seed: u64) -> Result<ModelGraph, CliError> {
    match &cfg.checkpoint {
        Some(path) => {
            let base = read_checkpoint(path)?;
            let head = HeadConfig {
                dense_widths: cfg.head_widths.clone(),
                dropout_rate: cfg.dropout_rate,
            };
            Ok(transfer(&base, head, 2, cfg.freeze.policy(), seed)?)
        }
        None => Ok(ModelGraph::build(cfg.model_config(), cfg.kind, seed)?),
    }
}

fn cmd_train(cfg: &CliConfig) -> Result<(), CliError> {
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let out = PathBuf::from(require(&cfg.out_dir, "out")?);
    let seed = cfg.resolve_seed();
    let start = Instant::now();

    let origin = Path::new(manifest_path);
    let manifest = dataset::read_manifest(origin)?;
    let spec = SplitSpec::default_with_seed(seed);
    let (train_m, val_m, test_m) = stratified_split(&manifest, &spec)?;

    let mut model = build_or_transfer(cfg, seed)?;
    let res = model.config.input_resolution;
    let ch = model.config.in_channels;
    let train_set = dataset::load_samples(origin, &train_m, res, ch)?;
    let val_set = dataset::load_samples(origin, &val_m, res, ch)?;
    let test_set = dataset::load_samples(origin, &test_m, res, ch)?;

    let outcome = train(&mut model, &train_set, &val_set, &cfg.train_config())?;
    let (cm, m) = eval_metrics(&mut model, &test_set)?;

    fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("checkpoint.pdtl"), outcome.best.encode())
        .map_err(|e| CliError::Runtime(format!("cannot write checkpoint: {e}")))?;
    for (name, split) in [("train.csv", &train_m), ("val.csv", &val_m), ("test.csv", &test_m)] {
        dataset::write_manifest(&out.join(name), &absolutize(split, origin))?;
    }
    let report = RunReport {
        best_epoch: outcome.history.best_epoch,
        history: outcome.history.records.clone(),
        confusion: cm,
        metrics: m,
        seconds: start.elapsed().as_secs_f64(),
        config_echo: cfg.to_text(),
    };
    crate::report::write_run_report(&out, &report)?;
    println!(
        "trained {} epochs (best {}), test accuracy {:.6}; reports in {}",
        report.history.len(),
        report.best_epoch + 1,
        m.accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_crossval(cfg: &CliConfig) -> Result<(), CliError> {
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let out = PathBuf::from(require(&cfg.out_dir, "out")?);
    if cfg.k < 2 {
        return Err(CliError::Usage("crossval needs --k >= 2".into()));
    }
    let seed = cfg.resolve_seed();
    let start = Instant::now();

    let origin = Path::new(manifest_path);
    let manifest = dataset::read_manifest(origin)?;
    let all = dataset::load_samples(origin, &manifest, cfg.resolution, cfg.channels)?;
    let index: std::collections::HashMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.path.as_str(), i))
        .collect();
    let pick = |m: &DatasetManifest| -> Vec<Sample> {
        m.entries
            .iter()
            .map(|e| all[index[e.path.as_str()]].clone())
            .collect()
    };

    let folds = kfold(&manifest, cfg.k, seed)?;
    let mut results = Vec::with_capacity(cfg.k);
    for (f, (train_m, val_m)) in folds.iter().enumerate() {
        let train_set = pick(train_m);
        let val_set = pick(val_m);
        let mut model = build_or_transfer(cfg, seed.wrapping_add(f as u64))?;
        let mut tc = cfg.train_config();
        tc.seed = seed.wrapping_add(f as u64);
        train(&mut model, &train_set, &val_set, &tc)?;
        let (_, m) = eval_metrics(&mut model, &val_set)?;
        println!(
            "fold {}/{}: val accuracy {:.6}",
            f + 1,
            cfg.k,
            m.accuracy
        );
        results.push(FoldResult {
            fold: f,
            train_size: train_set.len(),
            val_size: val_set.len(),
            metrics: m,
        });
    }
    let report = CrossvalReport {
        folds: results,
        seconds: start.elapsed().as_secs_f64(),
        config_echo: cfg.to_text(),
    };
    crate::report::write_crossval_report(&out, &report)?;
    println!("cross-validation reports in {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &CliConfig) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let out = PathBuf::from(require(&cfg.out_dir, "out")?);
    let start = Instant::now();
    let mut model = load_model(ckpt)?;
    let (_, set) = load_set(manifest_path, &model)?;
    let (cm, m) = eval_metrics(&mut model, &set)?;
    let report = RunReport {
        history: Vec::new(),
        best_epoch: 0,
        confusion: cm,
        metrics: m,
        seconds: start.elapsed().as_secs_f64(),
        config_echo: cfg.to_text(),
    };
    crate::report::write_run_report(&out, &report)?;
    println!(
        "evaluated {} images: accuracy {:.6}; reports in {}",
        set.len(),
        m.accuracy,
        out.display()
    );
    Ok(())
}

/// The images a predict/explain invocation names: one --image, or every
/// entry of a --manifest.
fn named_images(cfg: &CliConfig) -> Result<Vec<(PathBuf, String)>, CliError> {
    if let Some(img) = &cfg.image {
        return Ok(vec![(PathBuf::from(img), img.clone())]);
    }
    if let Some(mp) = &cfg.manifest {
        let origin = Path::new(mp);
        let manifest = dataset::read_manifest(origin)?;
        return Ok(manifest
            .entries
            .iter()
            .map(|e| (dataset::resolve_entry_path(origin, &e.path), e.path.clone()))
            .collect());
    }
    Err(CliError::Usage("need --image or --manifest".into()))
}

fn cmd_predict(cfg: &CliConfig) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let mut model = load_model(ckpt)?;
    let res = model.config.input_resolution;
    let ch = model.config.in_channels;
    for (path, display) in named_images(cfg)? {
        let img = imageio::load_image(&path)?;
        let sample = Sample {
            input: dataset::preprocess(&img, res, ch)?,
            label: 0,
        };
        let probs = &predict_probs(&mut model, std::slice::from_ref(&sample))?[0];
        let label = if probs[0] >= probs[1] { "female" } else { "male" };
        println!(
            "{display}\t{label}\tp_female={:.6}\tp_male={:.6}",
            probs[0], probs[1]
        );
    }
    Ok(())
}

fn cmd_explain(cfg: &CliConfig) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let out = PathBuf::from(require(&cfg.out_dir, "out")?);
    let mut model = load_model(ckpt)?;
    let res = model.config.input_resolution;
    let ch = model.config.in_channels;
    let target = match &cfg.target_layer {
        Some(name) => Some(
            model
                .node_index(name)
                .ok_or_else(|| CliError::Usage(format!("no layer named '{name}'")))?,
        ),
        None => None,
    };
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    for (path, _) in named_images(cfg)? {
        let img = imageio::load_image(&path)?;
        let boxed = dataset::preprocess_image(&img, res)?;
        let input = dataset::preprocess(&img, res, ch)?;
        let class = match cfg.class {
            Some(c) => c,
            None => {
                let sample = Sample {
                    input: input.clone(),
                    label: 0,
                };
                let probs = &predict_probs(&mut model, std::slice::from_ref(&sample))?[0];
                if probs[0] >= probs[1] {
                    0
                } else {
                    1
                }
            }
        };
        let map = gradcam(&mut model, &input, class, target)?;
        let up = upsample_bilinear(&map, res, res)?;
        let overlay = colorize_overlay(&boxed, &up, cfg.alpha)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let dest = out.join(format!("{stem}_overlay.png"));
        imageio::save_overlay(&dest, &overlay)?;
        println!("{} -> {} (class {class})", path.display(), dest.display());
    }
    Ok(())
}

fn cmd_bench(cfg: &CliConfig) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let mut model = load_model(ckpt)?;
    let (_, set) = load_set(manifest_path, &model)?;
    let report = bench_inference(&mut model, &set, cfg.warmup, cfg.runs)?;
    print!("{}", report.render());
    if let Some(out) = &cfg.out_dir {
        let dir = PathBuf::from(out);
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        fs::write(dir.join("bench.txt"), report.render())
            .map_err(|e| CliError::Runtime(format!("cannot write bench report: {e}")))?;
    }
    Ok(())
}
