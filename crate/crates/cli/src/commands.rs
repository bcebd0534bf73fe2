use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use goldspot::dataset::{self, AnnotatedImage, BalanceOptions, LabeledSet, SplitFractions};
use goldspot::eval::{self, format_sig, EvalReport, PrPoint, SweepOptions};
use goldspot::imaging;
use goldspot::logdetect;
use goldspot::nn::gradcheck::{check_classifier, check_dae};
use goldspot::nn::{GradCheckOptions, GradCheckReport, Matrix};
use goldspot::sda::{self, Corruptor, SdaModel, TrainingHistory};
use goldspot::synth::{self, SynthSpec};
use goldspot::transfer::{self, TlSetting, TransferOptions};
use goldspot::{rng, PatchLabel};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::corpus;
use crate::train::{self, sub_seed};

const SEED_BALANCE: u64 = 10;
const SEED_TRANSFER: u64 = 11;
const SEED_REPETITION: u64 = 100;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write `{}`", path.display()))
}

fn echo_config(dir: &Path, command: &str, config: &RunConfig, args: serde_json::Value) -> Result<()> {
    let doc = json!({ "command": command, "args": args, "config": config });
    eval::write_json(&doc, dir.join("config.json"))?;
    Ok(())
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create `{}`", path.display()))
}

pub fn synth(
    config: &RunConfig,
    dir: &Path,
    count: usize,
    particles: Option<usize>,
    distractors: Option<usize>,
    noise: Option<f64>,
    size: Option<usize>,
) -> Result<()> {
    let mut spec = SynthSpec::default().with_radius(config.radius);
    if let Some(n) = particles {
        spec.n_particles = n;
    }
    if let Some(n) = distractors {
        spec.n_distractors = n;
    }
    if let Some(s) = noise {
        spec.noise_sigma = s;
    }
    if let Some(s) = size {
        spec.width = s;
        spec.height = s;
    }
    spec.seed = config.seed;
    spec.validate()?;
    echo_config(dir, "synth", config, json!({ "count": count, "spec": spec }))?;
    for i in 0..count {
        let image_spec = SynthSpec {
            seed: sub_seed(config.seed, i as u64),
            ..spec.clone()
        };
        let (image, annotations) = synth::generate(&image_spec)?;
        let name = format!("img_{i:03}");
        imaging::save_image(&image, dir.join(format!("{name}.pgm")))?;
        dataset::save_annotations(&annotations, dir.join(format!("{name}.csv")))?;
    }
    info!("wrote {count} images");
    Ok(())
}

pub fn detect(config: &RunConfig, dir: &Path, inputs: &[std::path::PathBuf], threshold: f64) -> Result<()> {
    let bank = config.scale_bank()?;
    let paths = corpus::image_paths(inputs)?;
    echo_config(dir, "detect", config, json!({ "inputs": inputs, "threshold": threshold }))?;
    let out = dir.join("detections");
    mkdir(&out)?;
    for path in &paths {
        let image = imaging::load_image(path)?;
        let dets = logdetect::detect(&image, &bank, threshold)?;
        info!("{}: {} detections", path.display(), dets.len());
        logdetect::save_detections(&dets, out.join(format!("{}.csv", corpus::stem(path))))?;
    }
    Ok(())
}

fn balance_options(config: &RunConfig, per_class: Option<usize>, seed: u64) -> BalanceOptions {
    BalanceOptions {
        patch_side: config.patch_side,
        label_threshold: config.label_radius,
        n_per_class: per_class,
        seed,
    }
}

pub fn extract(
    config: &RunConfig,
    dir: &Path,
    corpus_dir: &Path,
    per_class: Option<usize>,
    half: bool,
) -> Result<()> {
    let mut images = corpus::load_annotated(corpus_dir)?;
    if half {
        images = images
            .iter()
            .map(AnnotatedImage::downscaled_half)
            .collect::<goldspot::Result<_>>()?;
    }
    echo_config(
        dir,
        "extract",
        config,
        json!({ "corpus": corpus_dir, "per_class": per_class, "half": half }),
    )?;
    let opts = balance_options(config, per_class, sub_seed(config.seed, SEED_BALANCE));
    let set = dataset::build_balanced(&images, &opts)?;
    let (bg, fg) = set.class_counts();
    info!("{} patches: {fg} particle, {bg} background", set.len());
    dataset::save_patch_set(&set, dir.join("patches"))?;
    Ok(())
}

fn load_labeled(path: &Path) -> Result<LabeledSet> {
    let set = dataset::load_patch_set(path)?;
    if set.is_empty() {
        bail!("patch set `{}` is empty", path.display());
    }
    if set.patches.iter().any(|p| p.label.is_none()) {
        bail!("patch set `{}` has unlabeled patches", path.display());
    }
    Ok(set)
}

fn history_csv(h: &TrainingHistory) -> String {
    let mut out = String::from("phase,layer,epoch,loss\n");
    for (k, layer) in h.pretrain.iter().enumerate() {
        for (e, loss) in layer.iter().enumerate() {
            let _ = writeln!(out, "pretrain,{},{},{loss}", k + 1, e + 1);
        }
    }
    for (e, loss) in h.finetune.iter().enumerate() {
        let _ = writeln!(out, "finetune,,{},{loss}", e + 1);
    }
    out
}

fn save_model(dir: &Path, model: &SdaModel) -> Result<()> {
    sda::save_model(model, dir.join("model.json"))?;
    write(&dir.join("history.csv"), &history_csv(&model.metadata.history))
}

pub fn train(config: &RunConfig, dir: &Path, patches: &Path, grid: bool) -> Result<()> {
    let set = load_labeled(patches)?;
    echo_config(dir, "train", config, json!({ "patches": patches, "grid": grid }))?;
    let trained = train::train(config, &set.patches, grid, config.seed)?;
    info!(
        "training accuracy {:.4}",
        sda::accuracy(&trained.model, &set.patches)?
    );
    save_model(dir, &trained.model)?;
    if grid {
        let mut csv = String::from("pretrain_lr,finetune_lr,mean_accuracy,fold_accuracy\n");
        for c in &trained.grid {
            let folds: Vec<String> = c.fold_accuracy.iter().map(|a| format_sig(*a, 6)).collect();
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                c.pretrain_lr,
                c.finetune_lr,
                format_sig(c.mean_accuracy, 6),
                folds.join(";")
            );
        }
        write(&dir.join("grid.csv"), &csv)?;
    }
    Ok(())
}

pub fn transfer(
    config: &RunConfig,
    dir: &Path,
    source: &Path,
    patches: &Path,
    setting: &TlSetting,
    freeze_output: bool,
) -> Result<()> {
    let source_model = sda::load_model(source)?;
    let set = load_labeled(patches)?;
    echo_config(
        dir,
        "transfer",
        config,
        json!({
            "source": source,
            "patches": patches,
            "setting": setting,
            "freeze_output": freeze_output,
        }),
    )?;
    let ft = config.finetune_config(config.finetune_lr, sub_seed(config.seed, SEED_TRANSFER));
    let mut model = transfer::transfer(
        &source_model,
        &set.patches,
        setting,
        &ft,
        TransferOptions { freeze_output },
    )?;
    model.metadata.magnification = Some(config.magnification.to_string());
    info!("setting {setting}: training accuracy {:.4}", sda::accuracy(&model, &set.patches)?);
    save_model(dir, &model)
}

pub fn classify(config: &RunConfig, dir: &Path, model_path: &Path, patches: &Path) -> Result<()> {
    let model = sda::load_model(model_path)?;
    let set = dataset::load_patch_set(patches)?;
    echo_config(dir, "classify", config, json!({ "model": model_path, "patches": patches }))?;
    let preds = sda::predict_many(&model, &set.patches)?;
    let mut csv = String::from("index,center_x,center_y,label,p_particle,truth\n");
    for (i, ((label, p), patch)) in preds.iter().zip(&set.patches).enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{}",
            format_sig(patch.center.0, 6),
            format_sig(patch.center.1, 6),
            label.as_str(),
            format_sig(*p, 6),
            patch.label.map_or("", PatchLabel::as_str)
        );
    }
    write(&dir.join("predictions.csv"), &csv)?;
    if !set.is_empty() && set.patches.iter().all(|p| p.label.is_some()) {
        let acc = sda::accuracy(&model, &set.patches)?;
        info!("accuracy {acc:.4} on {} patches", set.len());
        eval::write_json(&json!({ "accuracy": acc, "patches": set.len() }), dir.join("report.json"))?;
    }
    Ok(())
}

fn sweep_options(config: &RunConfig, model: Option<&SdaModel>) -> SweepOptions {
    SweepOptions {
        match_radius: config.match_radius,
        patch_side: model.map_or(config.patch_side, |m| m.patch_side),
    }
}

pub fn eval(config: &RunConfig, dir: &Path, corpus_dir: &Path, model_path: Option<&Path>) -> Result<()> {
    let images = corpus::load_annotated(corpus_dir)?;
    let model = model_path.map(sda::load_model).transpose()?;
    echo_config(dir, "eval", config, json!({ "corpus": corpus_dir, "model": model_path }))?;
    let bank = config.scale_bank()?;
    let opts = sweep_options(config, model.as_ref());
    let curve = eval::pr_sweep(&images, &bank, &config.thresholds, model.as_ref(), &opts)?;
    let report = EvalReport::from_curve(curve);
    log_report("evaluation", &report);
    eval::write_pr_curve_csv(&report.pr_curve, dir.join("pr_curve.csv"))?;
    eval::write_json(&report, dir.join("report.json"))?;
    Ok(())
}

fn log_report(what: &str, r: &EvalReport) {
    info!(
        "{what}: precision {:.4}, recall {:.4}, F {:.4}",
        r.precision, r.recall, r.f_measure
    );
}

pub fn pipeline(
    config: &RunConfig,
    dir: &Path,
    corpus_dir: &Path,
    model_path: Option<&Path>,
    grid: bool,
) -> Result<()> {
    let images = corpus::load_annotated(corpus_dir)?;
    echo_config(
        dir,
        "pipeline",
        config,
        json!({ "corpus": corpus_dir, "model": model_path, "grid": grid }),
    )?;
    match model_path {
        Some(path) => apply_model(config, dir, &images, &sda::load_model(path)?),
        None => repeated_experiment(config, dir, &images, grid),
    }
}

/// Detect, classify and score a corpus with a trained model.
fn apply_model(config: &RunConfig, dir: &Path, images: &[AnnotatedImage], model: &SdaModel) -> Result<()> {
    let bank = config.scale_bank()?;
    let mut thresholds = config.thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let scored = images
        .iter()
        .map(|img| eval::score_image(img, &bank, thresholds[0], Some(model), model.patch_side))
        .collect::<goldspot::Result<Vec<_>>>()?;
    let curve = eval::curve_from_scored(images, &scored, &thresholds, config.match_radius);
    let report = EvalReport::from_curve(curve);
    log_report("LoG+SDA", &report);
    let operating = eval::best_f(&report.pr_curve).map_or(thresholds[0], |p| p.threshold);
    let out = dir.join("detections");
    mkdir(&out)?;
    for (img, s) in images.iter().zip(&scored) {
        logdetect::save_detections(&s.kept(operating), out.join(format!("{}.csv", img.id)))?;
    }
    eval::write_pr_curve_csv(&report.pr_curve, dir.join("pr_curve.csv"))?;
    eval::write_json(&report, dir.join("report.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    log: eval::AggregateReport,
    log_sda: eval::AggregateReport,
}

/// Image-level train/test splits, each training a model and scoring LoG alone
/// and LoG followed by the model on the held-out images.
fn repeated_experiment(config: &RunConfig, dir: &Path, images: &[AnnotatedImage], grid: bool) -> Result<()> {
    let bank = config.scale_bank()?;
    let fractions = SplitFractions {
        train: config.train_fraction,
        test: 1.0 - config.train_fraction,
    };
    let mut log_reports = Vec::new();
    let mut sda_reports = Vec::new();
    for rep in 0..config.reps {
        let seed = sub_seed(config.seed, SEED_REPETITION + rep as u64);
        let part = dataset::split(images.len(), fractions, sub_seed(seed, 1))?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>();
        let (train_imgs, test_imgs) = (pick(&part.train), pick(&part.test));
        let train_set = dataset::build_balanced(&train_imgs, &balance_options(config, None, sub_seed(seed, 2)))?;
        let trained = train::train(config, &train_set.patches, grid, sub_seed(seed, 3))?;
        let model = &trained.model;
        let test_set = dataset::build_balanced(&test_imgs, &balance_options(config, None, sub_seed(seed, 4)))?;

        let opts = sweep_options(config, Some(model));
        let log_curve = eval::pr_sweep(&test_imgs, &bank, &config.thresholds, None, &opts)?;
        let sda_curve = eval::pr_sweep(&test_imgs, &bank, &config.thresholds, Some(model), &opts)?;
        let log_report = EvalReport::from_curve(log_curve);
        let mut sda_report = EvalReport::from_curve(sda_curve);
        sda_report.accuracy = Some(sda::accuracy(model, &test_set.patches)?);
        info!(
            "repetition {}/{}: LoG F {:.4}, LoG+SDA F {:.4}, patch accuracy {:.4}",
            rep + 1,
            config.reps,
            log_report.f_measure,
            sda_report.f_measure,
            sda_report.accuracy.unwrap_or(0.0)
        );
        let rep_dir = dir.join(format!("rep_{rep:02}"));
        mkdir(&rep_dir)?;
        eval::write_pr_curve_csv(&log_report.pr_curve, rep_dir.join("pr_curve_log.csv"))?;
        eval::write_pr_curve_csv(&sda_report.pr_curve, rep_dir.join("pr_curve_log_sda.csv"))?;
        eval::write_json(
            &json!({
                "train_images": part.train,
                "test_images": part.test,
                "pretrain_lr": trained.pretrain_lr,
                "finetune_lr": trained.finetune_lr,
                "log": log_report,
                "log_sda": sda_report,
            }),
            rep_dir.join("report.json"),
        )?;
        log_reports.push(log_report);
        sda_reports.push(sda_report);
    }
    let summary = Summary {
        log: eval::aggregate(&log_reports)?,
        log_sda: eval::aggregate(&sda_reports)?,
    };
    info!(
        "over {} repetitions: LoG F {}, LoG+SDA F {}",
        config.reps, summary.log.f_measure, summary.log_sda.f_measure
    );
    for (name, agg) in [("log", &summary.log), ("log_sda", &summary.log_sda)] {
        if let Some(curve) = &agg.mean_pr_curve {
            let points: Vec<PrPoint> = curve
                .iter()
                .map(|(t, p, r)| PrPoint {
                    threshold: *t,
                    precision: p.mean,
                    recall: r.mean,
                    f_measure: eval::f_measure(p.mean, r.mean).unwrap_or(0.0),
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                })
                .collect();
            eval::write_pr_curve_csv(&points, dir.join(format!("pr_curve_mean_{name}.csv")))?;
        }
    }
    eval::write_json(&summary, dir.join("summary.json"))?;
    Ok(())
}

/// Checks both training objectives of a freshly initialized network on
/// synthetic patches. Succeeds iff every check is below tolerance.
pub fn gradcheck(layers: &[usize], batch: usize, seed: u64) -> Result<ExitCode> {
    let sizes = if layers.is_empty() { vec![50, 50, 50] } else { layers.to_vec() };
    if batch == 0 {
        bail!("--batch must be positive");
    }
    let spec = SynthSpec {
        width: 128,
        height: 128,
        n_particles: batch.div_ceil(2).max(1),
        seed,
        ..Default::default()
    };
    let (image, annotations) = synth::generate(&spec)?;
    let img = AnnotatedImage {
        id: "gradcheck".into(),
        image,
        annotations,
    };
    let set = dataset::build_balanced(
        std::slice::from_ref(&img),
        &BalanceOptions {
            seed,
            ..Default::default()
        },
    )?;
    let patches = &set.patches[..batch.min(set.len())];
    let rows: Vec<Vec<f64>> = patches.iter().map(|p| p.values.clone()).collect();
    let labels: Vec<usize> = patches
        .iter()
        .map(|p| p.label.expect("balanced patches are labeled").index())
        .collect();
    let x = Matrix::from_rows(&rows)?;
    let side = patches[0].side;
    let model = SdaModel::init(side, &sizes, seed)?;
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };

    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let mut input = x.clone();
    let mut n_in = side * side;
    for (k, layer) in model.hidden.iter().enumerate() {
        let mut corrupted = input.clone();
        Corruptor::new(0.1, rng::derived(seed, k as u64)).apply(corrupted.data_mut());
        let name = format!("denoising layer {} ({n_in}-{})", k + 1, layer.n_hidden());
        reports.push((name, check_dae(layer, &input, &corrupted, &opts)));
        input = layer.encode_batch(&input);
        n_in = layer.n_hidden();
    }
    let arch: Vec<String> = std::iter::once(side * side)
        .chain(sizes.iter().copied())
        .chain(std::iter::once(sda::N_CLASSES))
        .map(|n| n.to_string())
        .collect();
    reports.push((
        format!("classifier ({})", arch.join("-")),
        check_classifier(&model.hidden, &model.output, &x, &labels, &opts),
    ));
    let mut ok = true;
    for (name, r) in &reports {
        println!(
            "{name}: max relative error {:.3e} over {} coordinates ({})",
            r.max_relative_error,
            r.checked,
            if r.passed { "ok" } else { "FAILED" }
        );
        ok &= r.passed;
    }
    let worst = reports.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {:.0e})", opts.tolerance);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
