//! Model training shared by `train` and `pipeline`, including the learning-rate grid.

use anyhow::Result;
use goldspot::dataset;
use goldspot::imaging::Patch;
use goldspot::rng;
use goldspot::sda::{self, CorruptionSpec, SdaModel};
use log::info;
use rand::Rng as _;
use serde::Serialize;

use crate::config::RunConfig;

/// A child seed for one named step of a run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    rng::derived(seed, stream).random()
}

const SEED_PRETRAIN: u64 = 1;
const SEED_CORRUPTION: u64 = 2;
const SEED_FINETUNE: u64 = 3;
const SEED_FOLDS: u64 = 4;

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

pub struct Trained {
    pub model: SdaModel,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub grid: Vec<GridCell>,
}

/// Pre-trains and fine-tunes one model with fixed learning rates.
pub fn fit(
    config: &RunConfig,
    patches: &[Patch],
    pretrain_lr: f64,
    finetune_lr: f64,
    seed: u64,
) -> Result<SdaModel> {
    let corruption = CorruptionSpec {
        level: config.corruption,
        seed: sub_seed(seed, SEED_CORRUPTION),
    };
    let pre = config.pretrain_config(pretrain_lr, sub_seed(seed, SEED_PRETRAIN));
    let model = sda::pretrain(patches, &pre, &corruption, &config.layer_sizes)?;
    let ft = config.finetune_config(finetune_lr, sub_seed(seed, SEED_FINETUNE));
    let mask = vec![true; model.hidden.len()];
    let mut model = sda::fine_tune(&model, patches, &ft, &mask, true)?;
    model.metadata.magnification = Some(config.magnification.to_string());
    model.metadata.seed = seed;
    Ok(model)
}

/// Trains on `patches`, choosing learning rates by k-fold validation accuracy
/// when `grid` is set. Ties go to the smaller fine-tune rate, then the smaller
/// pre-train rate.
pub fn train(config: &RunConfig, patches: &[Patch], grid: bool, seed: u64) -> Result<Trained> {
    if !grid {
        let model = fit(config, patches, config.pretrain_lr, config.finetune_lr, seed)?;
        return Ok(Trained {
            model,
            pretrain_lr: config.pretrain_lr,
            finetune_lr: config.finetune_lr,
            grid: Vec::new(),
        });
    }
    let all: Vec<usize> = (0..patches.len()).collect();
    let folds = dataset::cv_folds(&all, config.cv_folds, sub_seed(seed, SEED_FOLDS))?;
    let mut cells: Vec<GridCell> = config
        .pretrain_lr_grid
        .iter()
        .flat_map(|&p| {
            config.finetune_lr_grid.iter().map(move |&f| GridCell {
                pretrain_lr: p,
                finetune_lr: f,
                fold_accuracy: Vec::new(),
                mean_accuracy: 0.0,
            })
        })
        .collect();
    for (k, fold) in folds.iter().enumerate() {
        let mut in_fold = vec![false; patches.len()];
        fold.iter().for_each(|&i| in_fold[i] = true);
        let (val, fit_set): (Vec<Patch>, Vec<Patch>) =
            patches.iter().cloned().enumerate().fold(
                (Vec::new(), Vec::new()),
                |(mut v, mut t), (i, p)| {
                    if in_fold[i] { v.push(p) } else { t.push(p) }
                    (v, t)
                },
            );
        for &plr in &config.pretrain_lr_grid {
            let corruption = CorruptionSpec {
                level: config.corruption,
                seed: sub_seed(seed, SEED_CORRUPTION),
            };
            let pre = config.pretrain_config(plr, sub_seed(seed, SEED_PRETRAIN));
            let pretrained = sda::pretrain(&fit_set, &pre, &corruption, &config.layer_sizes)?;
            for cell in cells.iter_mut().filter(|c| c.pretrain_lr == plr) {
                let ft = config.finetune_config(cell.finetune_lr, sub_seed(seed, SEED_FINETUNE));
                let mask = vec![true; pretrained.hidden.len()];
                let tuned = sda::fine_tune(&pretrained, &fit_set, &ft, &mask, true)?;
                let acc = sda::accuracy(&tuned, &val)?;
                info!(
                    "fold {}/{}: pretrain lr {plr}, finetune lr {}: accuracy {acc:.4}",
                    k + 1,
                    folds.len(),
                    cell.finetune_lr
                );
                cell.fold_accuracy.push(acc);
            }
        }
    }
    for cell in &mut cells {
        cell.mean_accuracy = cell.fold_accuracy.iter().sum::<f64>() / cell.fold_accuracy.len() as f64;
    }
    let best = cells
        .iter()
        .reduce(|best, c| {
            let better = c.mean_accuracy > best.mean_accuracy
                || (c.mean_accuracy == best.mean_accuracy
                    && (c.finetune_lr, c.pretrain_lr) < (best.finetune_lr, best.pretrain_lr));
            if better { c } else { best }
        })
        .expect("grid is non-empty");
    let (plr, flr) = (best.pretrain_lr, best.finetune_lr);
    info!("grid choice: pretrain lr {plr}, finetune lr {flr}");
    let model = fit(config, patches, plr, flr, seed)?;
    Ok(Trained {
        model,
        pretrain_lr: plr,
        finetune_lr: flr,
        grid: cells,
    })
}
