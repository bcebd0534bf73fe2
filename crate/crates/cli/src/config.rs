use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use goldspot::nn::TrainConfig;
use goldspot::ScaleBank;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// The four acquisition magnifications, each with its own radius and threshold sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Magnification {
    Db1,
    Db2,
    Db3,
    Db4,
}

impl Magnification {
    pub fn radii(self) -> Vec<f64> {
        match self {
            Self::Db1 => vec![3.0, 4.0, 5.0],
            Self::Db2 => vec![3.0, 5.0, 7.0, 9.0],
            Self::Db3 => vec![5.0, 7.0, 9.0, 11.0],
            Self::Db4 => vec![9.0, 11.0, 13.0],
        }
    }

    pub fn thresholds(self) -> Vec<f64> {
        let steps = |hi: u32| (1..=hi / 5).map(|k| f64::from(k * 5)).collect();
        match self {
            Self::Db1 | Self::Db2 => vec![10.0, 15.0, 20.0, 25.0],
            Self::Db3 => steps(45),
            Self::Db4 => steps(55),
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Self::Db1 => 1000,
            _ => 100,
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Db1 => "db1",
            Self::Db2 => "db2",
            Self::Db3 => "db3",
            Self::Db4 => "db4",
        };
        f.write_str(s)
    }
}

impl FromStr for Magnification {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "db1" => Self::Db1,
            "db2" => Self::Db2,
            "db3" => Self::Db3,
            "db4" => Self::Db4,
            other => bail!("unknown magnification `{other}` (expected db1..db4)"),
        })
    }
}

/// Every tunable of a run. Serialized verbatim as the run's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub magnification: Magnification,
    /// Detector radii; the band is `radius ± delta` when this is empty.
    pub radii: Vec<f64>,
    pub radius: f64,
    pub delta: usize,
    pub thresholds: Vec<f64>,
    /// Detection-to-annotation distance below which a detection counts.
    pub match_radius: f64,
    pub patch_side: usize,
    pub label_radius: f64,
    pub layer_sizes: Vec<usize>,
    pub corruption: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub pretrain_lr_grid: Vec<f64>,
    pub finetune_lr_grid: Vec<f64>,
    pub cv_folds: usize,
    pub train_fraction: f64,
    pub reps: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn preset(magnification: Magnification) -> Self {
        let radii = magnification.radii();
        let radius = radii.iter().sum::<f64>() / radii.len() as f64;
        Self {
            magnification,
            radii,
            radius,
            delta: 1,
            thresholds: magnification.thresholds(),
            match_radius: radius,
            patch_side: 20,
            label_radius: 20.0,
            layer_sizes: vec![1000, 1000, 1000],
            corruption: 0.1,
            pretrain_epochs: 1000,
            finetune_epochs: 3000,
            batch_size: magnification.batch_size(),
            pretrain_lr: 0.01,
            finetune_lr: 0.1,
            pretrain_lr_grid: vec![0.01, 0.001],
            finetune_lr_grid: vec![0.1, 0.01],
            cv_folds: 3,
            train_fraction: 0.6,
            reps: 20,
            seed: 0,
        }
    }

    /// Preset of the magnification named by the overlay (or `fallback`), then
    /// the overlay's own keys on top.
    pub fn from_overlay(overlay: Option<&Value>, fallback: Magnification) -> Result<Self> {
        let magnification = match overlay.and_then(|v| v.get("magnification")) {
            Some(m) => serde_json::from_value(m.clone()).context("config key `magnification`")?,
            None => fallback,
        };
        let mut base = serde_json::to_value(Self::preset(magnification))?;
        if let Some(overlay) = overlay {
            let Value::Object(keys) = overlay else {
                bail!("config must be a JSON object");
            };
            let Value::Object(target) = &mut base else {
                unreachable!("config serializes to an object")
            };
            for (k, v) in keys {
                target.insert(k.clone(), v.clone());
            }
        }
        let config: Self = serde_json::from_value(base).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load_overlay(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config `{}`", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed config `{}`", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() && self.radius - (self.delta as f64) < 2.0 {
            bail!("--radius/--delta: smallest radius {} is below 2", self.radius - self.delta as f64);
        }
        if self.thresholds.is_empty() {
            bail!("--threshold: at least one threshold is required");
        }
        if !(self.match_radius > 0.0) {
            bail!("match_radius must be positive");
        }
        if self.patch_side == 0 {
            bail!("--patch-side must be positive");
        }
        if !(self.label_radius > 0.0) {
            bail!("--label-radius must be positive");
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            bail!("layer_sizes must list at least one positive size");
        }
        if !(0.0..1.0).contains(&self.corruption) {
            bail!("corruption must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!("train_fraction must lie strictly between 0 and 1");
        }
        if self.reps == 0 {
            bail!("--reps must be at least 1");
        }
        if self.pretrain_lr_grid.is_empty() || self.finetune_lr_grid.is_empty() {
            bail!("learning-rate grids must not be empty");
        }
        if self.cv_folds < 2 {
            bail!("cv_folds must be at least 2");
        }
        Ok(())
    }

    pub fn scale_bank(&self) -> Result<ScaleBank> {
        Ok(if self.radii.is_empty() {
            ScaleBank::build(self.radius, self.delta)?
        } else {
            ScaleBank::from_radii(&self.radii)?
        })
    }

    pub fn min_threshold(&self) -> f64 {
        self.thresholds.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn pretrain_config(&self, learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn finetune_config(&self, learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_follow_magnification() {
        let db1 = RunConfig::preset(Magnification::Db1);
        assert_eq!(db1.radii, [3.0, 4.0, 5.0]);
        assert_eq!(db1.radius, 4.0);
        assert_eq!(db1.batch_size, 1000);
        assert_eq!(db1.layer_sizes, [1000, 1000, 1000]);
        assert_eq!((db1.pretrain_epochs, db1.finetune_epochs, db1.reps), (1000, 3000, 20));
        let db3 = RunConfig::preset(Magnification::Db3);
        assert_eq!(db3.thresholds, [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0]);
        assert_eq!(db3.batch_size, 100);
        assert_eq!(RunConfig::preset(Magnification::Db4).thresholds.len(), 11);
        assert_eq!(RunConfig::preset(Magnification::Db2).radius, 6.0);
    }

    #[test]
    fn overlay_picks_preset_then_overrides() {
        let v = json!({"magnification": "db4", "reps": 3});
        let c = RunConfig::from_overlay(Some(&v), Magnification::Db1).unwrap();
        assert_eq!(c.magnification, Magnification::Db4);
        assert_eq!(c.radii, [9.0, 11.0, 13.0]);
        assert_eq!(c.reps, 3);
        assert!(RunConfig::from_overlay(Some(&json!({"bogus": 1})), Magnification::Db1).is_err());
        assert!(RunConfig::from_overlay(Some(&json!({"reps": 0})), Magnification::Db1).is_err());
    }

    #[test]
    fn bank_from_band_or_set() {
        let mut c = RunConfig::preset(Magnification::Db2);
        assert_eq!(c.scale_bank().unwrap().radii(), [3.0, 5.0, 7.0, 9.0]);
        c.radii.clear();
        c.radius = 6.0;
        c.delta = 2;
        assert_eq!(c.scale_bank().unwrap().radii(), [4.0, 5.0, 6.0, 7.0, 8.0]);
    }
}
