//! `goldspot`: detect, train, transfer and evaluate from the command line.
//!
//! Every command that produces files writes them into one run directory,
//! `--out` or `runs/<timestamp>-<command>/`, next to a `config.json` holding
//! the effective settings. Identical inputs and `--seed` give identical bytes.

// `!(x > 0.0)` rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod corpus;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use goldspot::transfer::TlSetting;
use serde_json::Value;

use crate::config::{Magnification, RunConfig};

#[derive(Parser)]
#[command(name = "goldspot", version, about = "Immunogold particle detection and recognition")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; each overrides `--config`, which overrides the preset.
#[derive(Args, Debug, Default)]
struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file overriding the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (default: runs/<timestamp>-<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Magnification preset for radii, thresholds and batch size.
    #[arg(long, global = true, value_enum)]
    magnification: Option<Magnification>,
    /// Nominal particle radius in pixels; the detector uses radius ± delta.
    #[arg(long, global = true)]
    radius: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<usize>,
    /// Detection threshold(s), comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    threshold: Vec<f64>,
    #[arg(long, global = true)]
    patch_side: Option<usize>,
    /// Patches centered closer than this to an annotation are particles.
    #[arg(long, global = true)]
    label_radius: Option<f64>,
    /// Detections closer than this to an annotation count as hits (default: the radius).
    #[arg(long, global = true)]
    match_radius: Option<f64>,
    /// Hidden layer sizes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    pretrain_lr: Option<f64>,
    #[arg(long, global = true)]
    finetune_lr: Option<f64>,
    /// Repetitions of the split-train-evaluate experiment.
    #[arg(long, global = true)]
    reps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Detect candidate particles with the multi-scale LoG filter.
    Detect {
        /// Images or directories of images.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Cut a balanced, labeled patch set from an annotated corpus.
    Extract {
        corpus: PathBuf,
        /// Positives (and negatives) to keep; all annotations by default.
        #[arg(long)]
        per_class: Option<usize>,
        /// Halve the images first (source preparation for a smaller target scale).
        #[arg(long)]
        half: bool,
    },
    /// Pre-train and fine-tune a model on a patch set.
    Train {
        patches: PathBuf,
        /// Pick learning rates by cross-validated grid search.
        #[arg(long)]
        grid: bool,
    },
    /// Fine-tune a copy of a source model on target patches.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        patches: PathBuf,
        /// Per-layer code, first layer first: 1 fine-tunes, 0 freezes.
        #[arg(long, default_value = "111")]
        setting: TlSetting,
        /// Keep the source output layer fixed instead of re-initializing it.
        #[arg(long)]
        freeze_output: bool,
    },
    /// Classify the patches of a patch set.
    Classify {
        #[arg(long)]
        model: PathBuf,
        patches: PathBuf,
    },
    /// Precision/recall over the threshold set, with or without a classifier.
    Eval {
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Detect, classify and evaluate; without `--model`, repeat split-train-evaluate.
    Pipeline {
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        grid: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        batch: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Synth { .. } => "synth",
            Self::Detect { .. } => "detect",
            Self::Extract { .. } => "extract",
            Self::Train { .. } => "train",
            Self::Transfer { .. } => "transfer",
            Self::Classify { .. } => "classify",
            Self::Eval { .. } => "eval",
            Self::Pipeline { .. } => "pipeline",
            Self::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let config = effective_config(&cli.common)?;
    if let Command::Gradcheck { batch } = cli.command {
        return commands::gradcheck(&cli.common.layers, batch, config.seed);
    }
    let (dir, created) = run_dir(cli.common.out.as_deref(), cli.command.name())?;
    log::info!("run directory {}", dir.display());
    let result = dispatch(cli, &config, &dir);
    if result.is_err() && created {
        // Leave no half-written run behind; a directory the user supplied is kept.
        let _ = std::fs::remove_dir_all(&dir);
    }
    result.map(|()| ExitCode::SUCCESS)
}

fn dispatch(cli: Cli, config: &RunConfig, dir: &Path) -> Result<()> {
    match cli.command {
        Command::Synth {
            count,
            particles,
            distractors,
            noise,
            size,
        } => commands::synth(config, dir, count, particles, distractors, noise, size)?,
        Command::Detect { inputs } => {
            let threshold = match cli.common.threshold.as_slice() {
                [] => config.min_threshold(),
                [t] => *t,
                _ => anyhow::bail!("--threshold: detect takes a single threshold"),
            };
            commands::detect(config, dir, &inputs, threshold)?
        }
        Command::Extract {
            corpus,
            per_class,
            half,
        } => commands::extract(config, dir, &corpus, per_class, half)?,
        Command::Train { patches, grid } => commands::train(config, dir, &patches, grid)?,
        Command::Transfer {
            source,
            patches,
            setting,
            freeze_output,
        } => commands::transfer(config, dir, &source, &patches, &setting, freeze_output)?,
        Command::Classify { model, patches } => commands::classify(config, dir, &model, &patches)?,
        Command::Eval { corpus, model } => commands::eval(config, dir, &corpus, model.as_deref())?,
        Command::Pipeline { corpus, model, grid } => {
            commands::pipeline(config, dir, &corpus, model.as_deref(), grid)?
        }
        Command::Gradcheck { .. } => unreachable!("handled before a run directory exists"),
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GOLDSPOT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("GOLDSPOT_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    Ok(())
}

/// Preset, then `--config`, then individual flags.
fn effective_config(c: &Common) -> Result<RunConfig> {
    let overlay = c.config.as_deref().map(RunConfig::load_overlay).transpose()?;
    let mut overlay = overlay.unwrap_or_else(|| Value::Object(Default::default()));
    let Value::Object(map) = &mut overlay else {
        anyhow::bail!("config must be a JSON object");
    };
    // A radius without an explicit radius set switches to the radius ± delta band.
    if map.contains_key("radius") || map.contains_key("delta") {
        map.entry("radii").or_insert_with(|| Value::Array(Vec::new()));
    }
    if let Some(r) = map.get("radius").cloned() {
        map.entry("match_radius").or_insert(r);
    }
    if let Some(m) = c.magnification {
        map.insert("magnification".into(), serde_json::to_value(m)?);
    }
    let mut config = RunConfig::from_overlay(Some(&overlay), Magnification::Db1)?;

    if c.radius.is_some() || c.delta.is_some() {
        config.radii.clear();
    }
    if let Some(r) = c.radius {
        config.radius = r;
        config.match_radius = r;
    }
    set(&mut config.delta, c.delta);
    set(&mut config.match_radius, c.match_radius);
    if !c.threshold.is_empty() {
        config.thresholds = c.threshold.clone();
    }
    set(&mut config.patch_side, c.patch_side);
    set(&mut config.label_radius, c.label_radius);
    if !c.layers.is_empty() {
        config.layer_sizes = c.layers.clone();
    }
    set(&mut config.pretrain_epochs, c.pretrain_epochs);
    set(&mut config.finetune_epochs, c.finetune_epochs);
    set(&mut config.batch_size, c.batch_size);
    set(&mut config.pretrain_lr, c.pretrain_lr);
    set(&mut config.finetune_lr, c.finetune_lr);
    set(&mut config.reps, c.reps);
    set(&mut config.seed, c.seed);
    config.validate()?;
    Ok(config)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// The run directory and whether this call created it.
fn run_dir(out: Option<&Path>, name: &str) -> Result<(PathBuf, bool)> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = PathBuf::from("runs").join(format!("{stamp}-{name}"));
            let mut dir = base.clone();
            let mut k = 2;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    let created = !dir.exists();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create run directory `{}`", dir.display()))?;
    Ok((dir, created))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_and_preset() {
        let c = Common {
            magnification: Some(Magnification::Db3),
            reps: Some(2),
            ..Default::default()
        };
        let cfg = effective_config(&c).unwrap();
        assert_eq!(cfg.radii, [5.0, 7.0, 9.0, 11.0]);
        assert_eq!(cfg.match_radius, 8.0);
        assert_eq!(cfg.reps, 2);

        let c = Common {
            radius: Some(6.0),
            delta: Some(2),
            threshold: vec![7.0],
            ..Default::default()
        };
        let cfg = effective_config(&c).unwrap();
        assert!(cfg.radii.is_empty());
        assert_eq!(cfg.scale_bank().unwrap().radii(), [4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(cfg.match_radius, 6.0);
        assert_eq!(cfg.thresholds, [7.0]);

        let bad = Common {
            radius: Some(2.5),
            ..Default::default()
        };
        assert!(effective_config(&bad).is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "goldspot", "transfer", "--source", "m.json", "p", "--setting", "011", "--seed", "3",
        ])
        .unwrap();
        assert_eq!(cli.common.seed, Some(3));
        assert!(Cli::try_parse_from(["goldspot", "transfer", "--source", "m", "p", "--setting", "01x"]).is_err());
    }
}
