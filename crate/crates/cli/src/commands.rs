use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tsattn::frontend::{Frontend, FrontendConfig, LogMelFeature};
use tsattn::gradcheck;
use tsattn::manifest::{load_features, Manifest};
use tsattn::model::{load_model, save_model, Model, ModelConfig};
use tsattn::robustness::{
    append_report, dump_feature_maps, evaluate_manifest, mask_region_noise, suppression_ratio, EvalReport, NoiseKind,
    NoiseSpec, RegionMask, ReportRow,
};
use tsattn::synth::{write_dataset, SynthConfig};
use tsattn::train::{train, write_metrics, Dataset, TrainConfig};
use tsattn::{Axis, Error};

use crate::{AxisArg, Command, EvalArgs, Failure, FrontendArgs, NoiseKindArg, TrainArgs};

type Outcome = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Io(format!("{what} {} does not exist", path.display())))
    }
}

impl FrontendArgs {
    fn build(&self) -> Result<Frontend, Failure> {
        if self.sample_rate == 0 || !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) || self.n_mels == 0 {
            return Err(invalid("sample rate, clip length and mel count must be positive"));
        }
        let cfg = FrontendConfig {
            sample_rate: self.sample_rate,
            clip_seconds: self.clip_seconds,
            n_mels: self.n_mels,
            ..FrontendConfig::default()
        };
        Ok(Frontend::new(cfg)?)
    }
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Featurize {
            manifest,
            out_dir,
            frontend,
        } => featurize(&manifest, &out_dir, &frontend),
        Command::SynthDataset {
            out_dir,
            n_per_class,
            classes,
            seed,
            sample_rate,
            seconds,
            distractor_level,
        } => {
            let cfg = SynthConfig {
                n_classes: classes,
                n_per_class,
                sample_rate,
                seconds,
                seed,
                distractor_level,
            };
            if !(distractor_level >= 0.0 && distractor_level.is_finite()) {
                return Err(invalid("distractor level must be a non-negative number"));
            }
            let m = write_dataset(&cfg, &out_dir)?;
            println!("wrote {} clips and {}", m.len(), out_dir.join("manifest.csv").display());
            Ok(())
        }
        Command::Train(args) => run_train(args),
        Command::Evaluate { eval } => {
            let (model, manifest, frontend) = open_eval(&eval)?;
            print_coefficients(&model);
            let report = evaluate_manifest(&model, &manifest, eval.fold, &frontend, None, eval.seed)?;
            print_report(&report);
            emit_row(&eval, "clean", f64::INFINITY, report.accuracy)
        }
        Command::NoiseEval {
            eval,
            kind,
            noise_file,
            snr,
        } => {
            let kind = match (kind, noise_file) {
                (NoiseKindArg::Gaussian, None) => NoiseKind::Gaussian,
                (NoiseKindArg::External, Some(p)) => NoiseKind::External(p),
                (NoiseKindArg::Gaussian, Some(_)) => {
                    return Err(invalid("--noise-file only applies to --kind external"))
                }
                (NoiseKindArg::External, None) => return Err(invalid("--kind external needs --noise-file")),
            };
            let spec = NoiseSpec::new(kind, snr)?;
            if let NoiseKind::External(p) = &spec.kind {
                require_file(p, "noise file")?;
            }
            let (model, manifest, frontend) = open_eval(&eval)?;
            let report = evaluate_manifest(&model, &manifest, eval.fold, &frontend, Some(&spec), eval.seed)?;
            print_report(&report);
            emit_row(&eval, spec.kind_name(), snr, report.accuracy)
        }
        Command::DumpMaps {
            model,
            input,
            block,
            out,
            mask_axis,
            mask_start,
            mask_end,
            seed,
            frontend,
        } => {
            let mask = mask_axis.map(|axis| {
                let axis = match axis {
                    AxisArg::Time => Axis::Time,
                    AxisArg::Frequency => Axis::Frequency,
                };
                RegionMask::new(axis, mask_start.unwrap_or(0), mask_end.unwrap_or(0))
            });
            dump_maps(&model, &input, block, &out, mask, seed, &frontend)
        }
        Command::Gradcheck { op, seed } => run_gradcheck(&op, seed),
    }
}

/// Writes one `.tsfa` per clip, skipping outputs newer than their audio.
fn featurize(manifest_path: &Path, out_dir: &Path, fe: &FrontendArgs) -> Outcome {
    let frontend = fe.build()?;
    require_file(manifest_path, "manifest")?;
    let manifest = Manifest::load(manifest_path)?;
    let results: Vec<Result<bool, (PathBuf, Error)>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let src = manifest.resolve(e);
            let dst = manifest.cache_path(out_dir, e);
            if up_to_date(&src, &dst) {
                return Ok(false);
            }
            let write = || -> Result<(), Error> {
                let feature: LogMelFeature<f32> = frontend.featurize_path(&src)?;
                if let Some(parent) = dst.parent() {
                    std::fs::create_dir_all(parent).map_err(|err| Error::Io {
                        path: parent.into(),
                        source: err,
                    })?;
                }
                feature.save(&dst)
            };
            write().map(|()| true).map_err(|err| (src, err))
        })
        .collect();

    let mut written = 0;
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(w) => written += usize::from(w),
            Err(f) => failures.push(f),
        }
    }
    println!(
        "{written} written, {} up to date, {} failed",
        manifest.len() - written - failures.len(),
        failures.len()
    );
    if failures.is_empty() {
        return Ok(());
    }
    for (path, err) in &failures {
        eprintln!("{}: {err}", path.display());
    }
    let numeric = failures.iter().all(|(_, e)| e.is_numeric());
    let msg = format!("{} of {} clips failed", failures.len(), manifest.len());
    Err(if numeric {
        Failure::Numeric(msg)
    } else {
        Failure::Io(msg)
    })
}

fn up_to_date(src: &Path, dst: &Path) -> bool {
    let modified = |p: &Path| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    match (modified(src), modified(dst)) {
        (Some(s), Some(d)) => d >= s,
        _ => false,
    }
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            require_file(p, "config")?;
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    let overrides: [(&str, Option<String>); 12] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("lr0", args.lr0.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("max_iters", args.max_iters.map(|v| v.to_string())),
        ("mixup_alpha", args.mixup_alpha.map(|v| v.to_string())),
        ("time_masks", args.time_masks.map(|v| v.to_string())),
        ("max_time_width", args.max_time_width.map(|v| v.to_string())),
        ("freq_masks", args.freq_masks.map(|v| v.to_string())),
        ("max_freq_width", args.max_freq_width.map(|v| v.to_string())),
        ("eval_every", args.eval_every.map(|v| v.to_string())),
        ("eval_fold", args.eval_fold.map(|v| v.to_string())),
        ("stop_at_eval_acc", args.stop_at_eval_acc.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> Outcome {
    let cfg = train_config(&args)?;
    let frontend = args.frontend.build()?;
    // Reject an unknown preset before reading any audio.
    ModelConfig::preset(&args.preset, 2)?;
    require_file(&args.manifest, "manifest")?;
    let manifest = Manifest::load(&args.manifest)?;
    let n_classes = manifest.n_classes();
    let mut model = Model::<f32>::from_preset(&args.preset, n_classes, frontend.config.n_mels, cfg.seed)?;

    let dataset = |m: &Manifest| -> Result<Dataset, Failure> {
        let features = load_features(m, &frontend, args.cache_dir.as_deref())?;
        let labels = m.entries.iter().map(|e| e.label).collect();
        Ok(Dataset::from_features(features, labels, n_classes)?)
    };
    let train_rows = manifest.without_fold(cfg.eval_fold);
    if train_rows.is_empty() {
        return Err(invalid(format!("no training rows outside fold {}", cfg.eval_fold)));
    }
    let train_set = dataset(&train_rows)?;
    let eval_rows = manifest.with_fold(cfg.eval_fold);
    let eval_set = if eval_rows.is_empty() {
        None
    } else {
        Some(dataset(&eval_rows)?)
    };

    let rows = train(&mut model, &train_set, eval_set.as_ref(), &cfg)?;
    if let Some(last) = rows.last() {
        let eval = last.eval_acc.map(|a| format!(" eval_acc {a:.4}")).unwrap_or_default();
        println!(
            "iter {} loss {:.4} train_acc {:.4}{eval}",
            last.iter, last.loss, last.train_acc
        );
    }
    save_model(&model, &args.out)?;
    if let Some(path) = &args.metrics {
        write_metrics(path, &rows)?;
    }
    print_coefficients(&model);
    Ok(())
}

fn open_eval(args: &EvalArgs) -> Result<(Model<f32>, Manifest, Frontend), Failure> {
    let frontend = args.frontend.build()?;
    let expected = match &args.preset {
        Some(name) => Some(ModelConfig::preset(name, 2)?),
        None => None,
    };
    require_file(&args.model, "model")?;
    require_file(&args.manifest, "manifest")?;
    let model = load_model::<f32>(&args.model, None)?;
    if let Some(exp) = expected {
        let got = model.config();
        if got.attention_variant != exp.attention_variant
            || got.attention_blocks != exp.attention_blocks
            || got.block_channels != exp.block_channels
        {
            return Err(invalid(format!(
                "checkpoint {} was not built from preset {}",
                args.model.display(),
                args.preset.as_deref().unwrap_or_default()
            )));
        }
    }
    if model.config().input_bands != frontend.config.n_mels {
        return Err(invalid(format!(
            "model expects {} mel bands but the frontend produces {}",
            model.config().input_bands,
            frontend.config.n_mels
        )));
    }
    let manifest = Manifest::load(&args.manifest)?;
    if manifest.with_fold(args.fold).is_empty() {
        return Err(invalid(format!("manifest has no rows in fold {}", args.fold)));
    }
    Ok((model, manifest, frontend))
}

fn print_coefficients(model: &Model<f32>) {
    for (block, [a, b, g]) in model.attention_coefficients() {
        println!("block {block} fusion alpha {a:.4} beta {b:.4} gamma {g:.4}");
    }
}

fn print_report(report: &EvalReport) {
    println!("accuracy {:.4}", report.accuracy);
    for c in &report.per_class {
        println!("class {} {}/{}", c.label, c.correct, c.total);
    }
}

fn emit_row(args: &EvalArgs, kind: &str, snr: f64, accuracy: f64) -> Outcome {
    let label = match &args.label {
        Some(l) => l.clone(),
        None => args
            .model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let row = ReportRow {
        noise_kind: kind.into(),
        snr_db: snr,
        model: label,
        accuracy,
    };
    match &args.report {
        Some(path) => Ok(append_report(path, &[row])?),
        None => {
            println!("{},{},{},{}", row.noise_kind, row.snr_db, row.model, row.accuracy);
            Ok(())
        }
    }
}

fn dump_maps(
    model_path: &Path,
    input: &Path,
    block: usize,
    out: &Path,
    mask: Option<RegionMask>,
    seed: u64,
    fe: &FrontendArgs,
) -> Outcome {
    let frontend = fe.build()?;
    require_file(model_path, "model")?;
    require_file(input, "input")?;
    let model = load_model::<f32>(model_path, None)?;
    let blocks = model.config().block_channels.len();
    if block == 0 || block > blocks {
        return Err(invalid(format!("block must be in 1..={blocks}, got {block}")));
    }
    let feature: LogMelFeature<f32> = if input.extension().is_some_and(|e| e == "tsfa") {
        LogMelFeature::load(input, &frontend.config)?
    } else {
        frontend.featurize_path(input)?
    };
    let values = match mask {
        Some(m) => {
            m.validate(feature.frames(), feature.bands())?;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            mask_region_noise(&feature.values, &m, &mut rng)?
        }
        None => feature.values.clone(),
    };
    let map = dump_feature_maps(&model, &values, block, out)?;
    println!(
        "wrote {} ({}x{}) and {}",
        out.display(),
        map.shape()[0],
        map.shape()[1],
        out.with_extension("csv").display()
    );
    if let Some(m) = mask {
        let clean = tsattn::robustness::channel_mean_map(&model, &feature.values, block)?;
        let pooled = m.pooled(block, feature.frames(), feature.bands());
        println!("suppression_ratio {:.6}", suppression_ratio(&clean, &map, &pooled)?);
    }
    Ok(())
}

fn run_gradcheck(op: &str, seed: u64) -> Outcome {
    let ops: Vec<&str> = if op == "all" { gradcheck::OPS.to_vec() } else { vec![op] };
    if let Some(bad) = ops.iter().find(|o| !gradcheck::OPS.contains(o)) {
        return Err(invalid(format!(
            "unknown op {bad:?}; valid ops: all, {}",
            gradcheck::OPS.join(", ")
        )));
    }
    let mut failed = Vec::new();
    for name in ops {
        let report = gradcheck::check_named(name, seed)?;
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{name} max_rel_error {:.3e} over {} entries {verdict}",
            report.max_rel_error, report.checked
        );
        if !report.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
